#pragma once

#include <algorithm>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "timoe/checkpoint.hpp"
#include "timoe/corpus.hpp"
#include "timoe/error.hpp"
#include "timoe/hash.hpp"
#include "timoe/lm.hpp"

namespace timoe {

/// containing: window [s, e] is eligible iff s <= t_q, so the window holding t_q
/// participates. strict: eligible iff e <= t_q (ablation only).
enum class EligibilityRule { containing, strict };

struct EligibilityMask {
  int query_year = 0;
  std::vector<bool> eligible;

  std::size_t count() const { return static_cast<std::size_t>(std::count(eligible.begin(), eligible.end(), true)); }

  /// Index of the most recent eligible entry.
  std::size_t latest() const {
    for (std::size_t i = eligible.size(); i-- > 0;) {
      if (eligible[i]) return i;
    }
    fail(ErrorCode::NoEligibleExpert, "mask has no eligible entry");
  }
};

inline EligibilityMask eligible_set(std::span<const TimeWindow> windows, int query_year,
                                    EligibilityRule rule = EligibilityRule::containing) {
  require(!windows.empty(), ErrorCode::NoEligibleExpert, "empty registry");
  EligibilityMask mask{query_year, std::vector<bool>(windows.size(), false)};
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const int bound = rule == EligibilityRule::containing ? windows[i].start_year : windows[i].end_year;
    mask.eligible[i] = bound <= query_year;
  }
  require(mask.count() > 0, ErrorCode::NoEligibleExpert,
          "no expert is eligible for year " + std::to_string(query_year));
  return mask;
}

inline std::size_t containing_index(std::span<const TimeWindow> windows, int year) {
  auto idx = find_window(windows, year);
  if (!idx) fail(ErrorCode::OutOfRange, "no registry window contains year " + std::to_string(year));
  return *idx;
}

template <typename T>
struct RegistryEntry {
  TimeWindow window;
  std::string checkpoint;  // path as written in the manifest
  Digest content_hash{};
  std::shared_ptr<const Model<T>> model;
};

/// Immutable set of time-specific experts sharing one tokenizer.
template <typename T>
class ExpertRegistry {
 public:
  ExpertRegistry() = default;

  ExpertRegistry(std::vector<RegistryEntry<T>> entries, Digest tokenizer_hash)
      : entries_(std::move(entries)), tokenizer_hash_(tokenizer_hash) {
    for (const auto& e : entries_) windows_.push_back(e.window);
    validate_windows(windows_);
    for (const auto& e : entries_) {
      require(e.model != nullptr, ErrorCode::InvalidConfig, "registry entry without a model");
      require(e.model->tokenizer_hash == tokenizer_hash_, ErrorCode::TokenizerMismatch,
              "expert " + e.window.label + " was trained with a different tokenizer");
      require(e.model->window == e.window, ErrorCode::InvalidConfig,
              "checkpoint window " + e.model->window.label + " differs from registry entry " + e.window.label);
      require(e.model->config.vocab_size == entries_.front().model->config.vocab_size, ErrorCode::InvalidConfig,
              "experts disagree on vocabulary size");
    }
  }

  /// In-memory registry; windows come from the models themselves.
  static ExpertRegistry from_models(std::vector<Model<T>> models, Digest tokenizer_hash) {
    std::vector<RegistryEntry<T>> entries;
    for (auto& m : models) {
      auto window = m.window;
      entries.push_back({window, "", Digest{}, std::make_shared<const Model<T>>(std::move(m))});
    }
    return ExpertRegistry(std::move(entries), tokenizer_hash);
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<RegistryEntry<T>>& entries() const { return entries_; }
  std::span<const TimeWindow> windows() const { return windows_; }
  const Digest& tokenizer_hash() const { return tokenizer_hash_; }
  const Model<T>& expert(std::size_t i) const { return *entries_.at(i).model; }
  std::size_t vocab_size() const { return expert(0).config.vocab_size; }
  std::size_t d_model() const { return expert(0).config.d_model; }
  std::size_t context_length() const {
    std::size_t L = expert(0).config.context_length;
    for (const auto& e : entries_) L = std::min(L, e.model->config.context_length);
    return L;
  }
  int earliest_year() const { return windows_.front().start_year; }
  int latest_year() const { return windows_.back().end_year; }

  /// Queries without a year behave as an up-to-date model.
  int resolve_year(std::optional<int> year) const { return year.value_or(latest_year()); }

  EligibilityMask eligible(int query_year, EligibilityRule rule = EligibilityRule::containing) const {
    return eligible_set(windows_, query_year, rule);
  }

  std::size_t containing(int year) const { return containing_index(windows_, year); }
  const RegistryEntry<T>& containing_expert(int year) const { return entries_[containing(year)]; }

  /// Digest over windows, checkpoint hashes and tokenizer; routers record it.
  Digest identity() const {
    Sha256 h;
    h.update("timoe-registry:v1:").update(to_hex(tokenizer_hash_));
    for (const auto& e : entries_) {
      h.update(":" + e.window.label + "=");
      h.update(to_hex(e.content_hash));
    }
    return h.finish();
  }

  ExpertRegistry with_model(std::size_t i, Model<T> model) const {
    auto entries = entries_;
    entries.at(i).model = std::make_shared<const Model<T>>(std::move(model));
    return ExpertRegistry(std::move(entries), tokenizer_hash_);
  }

 private:
  std::vector<RegistryEntry<T>> entries_;
  std::vector<TimeWindow> windows_;
  Digest tokenizer_hash_{};
};

// ---------------------------------------------------------------------------
// Registry manifest:
//   {"tokenizer_hash": hex,
//    "experts": [{"start_year", "end_year", "label", "checkpoint", "content_hash"}, ...]}
// Checkpoint paths are resolved relative to the manifest's directory.
// ---------------------------------------------------------------------------

struct RegistryManifestEntry {
  TimeWindow window;
  std::string checkpoint;
  Digest content_hash{};
};

struct RegistryManifest {
  Digest tokenizer_hash{};
  std::vector<RegistryManifestEntry> experts;

  nlohmann::json to_json() const {
    auto list = nlohmann::json::array();
    for (const auto& e : experts) {
      auto j = window_to_json(e.window);
      j["checkpoint"] = e.checkpoint;
      j["content_hash"] = to_hex(e.content_hash);
      list.push_back(std::move(j));
    }
    return {{"tokenizer_hash", to_hex(tokenizer_hash)}, {"experts", list}};
  }

  static RegistryManifest from_json(const nlohmann::json& j) {
    require(j.is_object(), ErrorCode::ParseError, "registry manifest must be an object");
    for (const auto& [key, value] : j.items()) {
      require(key == "tokenizer_hash" || key == "experts", ErrorCode::ParseError,
              "unknown registry manifest key '" + key + "'");
    }
    RegistryManifest m;
    m.tokenizer_hash = digest_from_hex(j.at("tokenizer_hash").get<std::string>());
    for (const auto& e : j.at("experts")) {
      m.experts.push_back({window_from_json(e), e.at("checkpoint").get<std::string>(),
                           digest_from_hex(e.at("content_hash").get<std::string>())});
    }
    return m;
  }
};

inline void write_registry_manifest(const std::filesystem::path& path, const RegistryManifest& manifest) {
  io::write_text(path, manifest.to_json().dump(2) + "\n");
}

/// Builds a manifest for checkpoints already on disk, hashing each file.
inline RegistryManifest manifest_for_checkpoints(const std::filesystem::path& manifest_dir,
                                                 const std::vector<std::string>& checkpoints) {
  RegistryManifest m;
  for (const auto& rel : checkpoints) {
    const auto path = manifest_dir / rel;
    auto model = load_model<float>(path);
    if (m.experts.empty()) m.tokenizer_hash = model.tokenizer_hash;
    m.experts.push_back({model.window, rel, file_digest(path)});
  }
  std::sort(m.experts.begin(), m.experts.end(),
            [](const auto& a, const auto& b) { return a.window.start_year < b.window.start_year; });
  return m;
}

template <typename T>
ExpertRegistry<T> load_registry(const std::filesystem::path& manifest_path) {
  const auto manifest = RegistryManifest::from_json(nlohmann::json::parse(io::read_text(manifest_path)));
  const auto dir = manifest_path.parent_path();
  std::vector<RegistryEntry<T>> entries;
  for (const auto& e : manifest.experts) {
    const auto path = dir / e.checkpoint;
    const auto bytes = io::read_file(path);
    require(sha256(bytes) == e.content_hash, ErrorCode::ChecksumMismatch,
            "checkpoint " + e.checkpoint + " does not match its registry hash");
    auto model = model_from_tensor_file<float>(decode_tensor_file(bytes));
    require(model.tokenizer_hash == manifest.tokenizer_hash, ErrorCode::TokenizerMismatch,
            "checkpoint " + e.checkpoint + " uses a different tokenizer than the registry");
    std::shared_ptr<const Model<T>> ptr;
    if constexpr (std::is_same_v<T, float>) {
      ptr = std::make_shared<const Model<T>>(std::move(model));
    } else {
      ptr = std::make_shared<const Model<T>>(convert_model<T>(model));
    }
    entries.push_back({e.window, e.checkpoint, e.content_hash, std::move(ptr)});
  }
  return ExpertRegistry<T>(std::move(entries), manifest.tokenizer_hash);
}

}  // namespace timoe
