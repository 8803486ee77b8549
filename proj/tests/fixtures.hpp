#pragma once

#include <random>
#include <vector>

#include "test_util.hpp"
#include "timoe/corpus.hpp"
#include "timoe/lm.hpp"
#include "timoe/temporal.hpp"

namespace timoe::testing {

/// One randomly initialised expert per window. Parameters are spread wider than
/// the default init so experts disagree noticeably.
template <typename T>
ExpertRegistry<T> random_registry(const std::vector<TimeWindow>& windows, ExpertConfig cfg, std::uint64_t seed,
                                  double spread = 0.3) {
  auto tok = Tokenizer::byte_level();
  std::vector<Model<T>> models;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    cfg.seed = seed + i;
    auto m = init_model<T>(cfg, windows[i], tok.hash());
    randomize(m.params, rng, spread);
    models.push_back(std::move(m));
  }
  return ExpertRegistry<T>::from_models(std::move(models), tok.hash());
}

/// Byte-tokenized shard with every document stamped `year`, repeated `copies` times.
inline Shard text_shard(const std::vector<std::string>& docs, int year, std::size_t length, std::size_t copies = 1) {
  auto tok = Tokenizer::byte_level();
  Packer packer(length, tok.eot_id());
  for (std::size_t c = 0; c < copies; ++c) {
    for (const auto& d : docs) packer.push(tok.encode(d), year);
  }
  return {{static_cast<std::uint32_t>(length), static_cast<std::uint32_t>(tok.vocab_size()), tok.hash()},
          packer.finish()};
}

}  // namespace timoe::testing
