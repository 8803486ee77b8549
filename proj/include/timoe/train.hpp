#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "timoe/checkpoint.hpp"
#include "timoe/corpus.hpp"
#include "timoe/error.hpp"
#include "timoe/hash.hpp"
#include "timoe/lm.hpp"
#include "timoe/mixture.hpp"
#include "timoe/temporal.hpp"

namespace timoe {

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

struct WSDSchedule {
  double max_lr = 1e-4;
  std::size_t warmup_steps = 0;
  std::size_t stable_steps = 0;
  std::size_t decay_steps = 0;
  double final_lr_ratio = 0.1;

  void validate() const {
    require(max_lr > 0, ErrorCode::InvalidConfig, "max_lr must be positive");
    require(final_lr_ratio >= 0 && final_lr_ratio <= 1, ErrorCode::InvalidConfig, "final_lr_ratio must be in [0, 1]");
  }
};

inline double lr_at(const WSDSchedule& s, std::size_t step) {
  if (step < s.warmup_steps) return s.max_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  step -= s.warmup_steps;
  if (step < s.stable_steps) return s.max_lr;
  step -= s.stable_steps;
  const double floor = s.final_lr_ratio * s.max_lr;
  if (step >= s.decay_steps) return floor;
  const double frac = static_cast<double>(step) / static_cast<double>(s.decay_steps);
  return s.max_lr + (floor - s.max_lr) * frac;
}

enum class LrKind { constant, wsd };

/// Run-level policy; resolved to a concrete schedule once the step count is known.
struct LrPolicy {
  LrKind kind = LrKind::wsd;
  double max_lr = 1e-4;
  double warmup_fraction = 0.02;
  double decay_fraction = 0.2;
  double final_lr_ratio = 0.1;

  static LrPolicy constant(double lr) { return {LrKind::constant, lr, 0.0, 0.0, 1.0}; }

  WSDSchedule resolve(std::size_t total_steps) const {
    require(warmup_fraction >= 0 && decay_fraction >= 0 && warmup_fraction + decay_fraction <= 1,
            ErrorCode::InvalidConfig, "warmup and decay fractions must fit in the run");
    WSDSchedule s{max_lr, 0, total_steps, 0, 1.0};
    if (kind == LrKind::wsd) {
      const auto total = static_cast<double>(total_steps);
      s.warmup_steps = static_cast<std::size_t>(std::round(warmup_fraction * total));
      s.decay_steps = static_cast<std::size_t>(std::round(decay_fraction * total));
      s.decay_steps = std::min(s.decay_steps, total_steps - s.warmup_steps);
      s.stable_steps = total_steps - s.warmup_steps - s.decay_steps;
      s.final_lr_ratio = final_lr_ratio;
    }
    s.validate();
    return s;
  }

  nlohmann::json to_json() const {
    return {{"kind", kind == LrKind::wsd ? "wsd" : "constant"},
            {"max_lr", max_lr},
            {"warmup_fraction", warmup_fraction},
            {"decay_fraction", decay_fraction},
            {"final_lr_ratio", final_lr_ratio}};
  }

  static LrPolicy from_json(const nlohmann::json& j, LrPolicy p) {
    for (const auto& [key, value] : j.items()) {
      if (key == "kind") {
        const auto k = value.get<std::string>();
        require(k == "wsd" || k == "constant", ErrorCode::ConfigError, "lr kind must be wsd or constant");
        p.kind = k == "wsd" ? LrKind::wsd : LrKind::constant;
      } else if (key == "max_lr") {
        p.max_lr = value.get<double>();
      } else if (key == "warmup_fraction") {
        p.warmup_fraction = value.get<double>();
      } else if (key == "decay_fraction") {
        p.decay_fraction = value.get<double>();
      } else if (key == "final_lr_ratio") {
        p.final_lr_ratio = value.get<double>();
      } else {
        fail(ErrorCode::ConfigError, "unknown lr key: " + key);
      }
    }
    return p;
  }
};

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;  // global L2 norm; 0 disables

  nlohmann::json to_json() const {
    return {{"beta1", beta1}, {"beta2", beta2}, {"eps", eps}, {"weight_decay", weight_decay}, {"grad_clip", grad_clip}};
  }

  static AdamWOptions from_json(const nlohmann::json& j, AdamWOptions o) {
    for (const auto& [key, value] : j.items()) {
      if (key == "beta1") o.beta1 = value.get<double>();
      else if (key == "beta2") o.beta2 = value.get<double>();
      else if (key == "eps") o.eps = value.get<double>();
      else if (key == "weight_decay") o.weight_decay = value.get<double>();
      else if (key == "grad_clip") o.grad_clip = value.get<double>();
      else fail(ErrorCode::ConfigError, "unknown optimizer key: " + key);
    }
    return o;
  }
};

/// Adam state for one flat parameter buffer. `decay` marks entries that get
/// decoupled weight decay; empty means none.
template <typename T>
class AdamW {
 public:
  AdamW(std::size_t n, AdamWOptions opts, std::vector<bool> decay = {})
      : opts_(opts), decay_(std::move(decay)), m_(n, T(0)), v_(n, T(0)) {
    require(decay_.empty() || decay_.size() == n, ErrorCode::ShapeMismatch, "decay mask size");
  }

  /// One update with already-clipped gradients.
  void step(std::span<T> params, std::span<const T> grads, double lr) {
    require(params.size() == m_.size() && grads.size() == m_.size(), ErrorCode::ShapeMismatch, "adam sizes");
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const T g = grads[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g * g;
      const double mhat = static_cast<double>(m_[i]) / bc1;
      const double vhat = static_cast<double>(v_[i]) / bc2;
      double p = static_cast<double>(params[i]);
      if (!decay_.empty() && decay_[i]) p -= lr * opts_.weight_decay * p;
      p -= lr * mhat / (std::sqrt(vhat) + opts_.eps);
      params[i] = static_cast<T>(p);
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  AdamWOptions opts_;
  std::vector<bool> decay_;
  std::vector<T> m_, v_;
  std::size_t t_ = 0;
};

/// Scales all buffers together so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_global_norm(std::span<std::vector<T>* const> grads, double max_norm) {
  double sq = 0;
  for (const auto* g : grads) {
    for (auto x : *g) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-6));
    for (auto* g : grads) {
      for (auto& x : *g) x *= scale;
    }
  }
  return norm;
}

inline std::vector<bool> decay_mask(const ParamLayout& layout) {
  std::vector<bool> mask(layout.total, false);
  for (const auto& t : layout.tensors) {
    if (t.decay) std::fill(mask.begin() + static_cast<std::ptrdiff_t>(t.offset),
                           mask.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size), true);
  }
  return mask;
}

template <typename T>
std::vector<bool> decay_mask(const Router<T>& r) {
  std::vector<bool> mask(r.num_params(), false);
  std::fill(mask.begin() + static_cast<std::ptrdiff_t>(r.w1()), mask.begin() + static_cast<std::ptrdiff_t>(r.b1()), true);
  if (r.config.hidden) {
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(r.w2()), mask.begin() + static_cast<std::ptrdiff_t>(r.b2()),
              true);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct StepLog {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  std::size_t tokens_seen = 0;

  nlohmann::json to_json() const { return {{"step", step}, {"lr", lr}, {"loss", loss}, {"tokens_seen", tokens_seen}}; }
};

struct TrainOptions {
  std::size_t batch_size = 8;
  std::size_t token_budget = 1'000'000;
  LrPolicy lr;
  AdamWOptions adam;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // steps; 0 keeps only the final result
  std::filesystem::path checkpoint_dir;
  std::function<void(const StepLog&)> on_step;

  /// Steps needed to consume the budget; each step sees batch_size * (L - 1) predicted tokens.
  std::size_t steps_for(std::size_t row_length) const {
    require(batch_size > 0, ErrorCode::InvalidConfig, "batch_size must be positive");
    require(row_length >= 2, ErrorCode::InvalidConfig, "rows need at least 2 tokens");
    const std::size_t per_step = batch_size * (row_length - 1);
    return std::max<std::size_t>(1, (token_budget + per_step - 1) / per_step);
  }
};

inline std::string step_name(std::size_t step) {
  std::string s = std::to_string(step);
  return "step-" + std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

/// SHA-256 over the shards' serialized bytes, in the order given.
inline Digest data_hash(std::span<const Shard> shards) {
  Sha256 h;
  for (const auto& s : shards) h.update(std::span<const std::uint8_t>(encode_shard(s.header, s.batch)));
  return h.finish();
}

template <typename T>
struct ExpertRun {
  Model<T> model;
  std::vector<StepLog> log;
};

/// Stage 1: pretrain one expert from scratch on a single bin. The result depends
/// only on (config, options.seed, shards); `config.seed` is overridden by the run seed.
template <typename T>
ExpertRun<T> train_expert(ExpertConfig config, const TimeWindow& window, std::span<const Shard> shards,
                          const Digest& tokenizer_hash, const TrainOptions& options) {
  config.seed = options.seed;
  config.validate();
  std::size_t row_length = 0;
  std::vector<const TokenId*> rows;
  for (const auto& s : shards) {
    require(s.header.tokenizer_hash == tokenizer_hash, ErrorCode::TokenizerMismatch,
            "shard was tokenized with a different tokenizer");
    require(s.header.vocab_size == config.vocab_size, ErrorCode::TokenizerMismatch, "shard vocab differs from model");
    require(row_length == 0 || s.header.length == row_length, ErrorCode::ShapeMismatch, "shards differ in row length");
    row_length = s.header.length;
    for (std::size_t r = 0; r < s.batch.rows(); ++r) {
      const int year = s.batch.doc_year[r];
      require(window.contains(year), ErrorCode::MixedBins,
              "row from " + std::to_string(year) + " outside bin " + window.label);
      rows.push_back(s.batch.tokens.data() + r * row_length);
    }
  }
  require(!rows.empty(), ErrorCode::EmptyBin, "no training rows for bin " + window.label);
  require(row_length - 1 <= config.context_length, ErrorCode::ContextOverflow,
          "row length exceeds the model context");

  ExpertRun<T> run{init_model<T>(config, window, tokenizer_hash), {}};
  auto& model = run.model;
  model.metadata["data_hash"] = to_hex(data_hash(shards));
  model.metadata["seed"] = std::to_string(options.seed);
  model.metadata["token_budget"] = std::to_string(options.token_budget);

  const std::size_t steps = options.steps_for(row_length);
  const auto schedule = options.lr.resolve(steps);
  AdamW<T> adam(model.params.size(), options.adam, decay_mask(model.layout));
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(rows.size());
  std::size_t cursor = order.size();
  std::vector<TokenId> batch(options.batch_size * row_length);
  std::size_t tokens_seen = 0;

  for (std::size_t step = 0; step < steps; ++step) {
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      std::copy_n(rows[order[cursor++]], row_length, batch.begin() + static_cast<std::ptrdiff_t>(b * row_length));
    }
    ForwardOptions fopts{config.dropout > 0, options.seed * 0x9E3779B97F4A7C15ULL + step};
    auto lg = loss_and_grads(model, RowView{batch, options.batch_size, row_length}, fopts);
    std::vector<T>* groups[] = {&lg.grads};
    clip_global_norm<T>(groups, options.adam.grad_clip);
    const double lr = lr_at(schedule, step);
    adam.step(model.params, lg.grads, lr);
    tokens_seen += options.batch_size * (row_length - 1);

    StepLog entry{step, lr, static_cast<double>(lg.loss), tokens_seen};
    if (options.on_step) options.on_step(entry);
    run.log.push_back(entry);
    if (options.checkpoint_every > 0 && (step + 1) % options.checkpoint_every == 0 && step + 1 < steps &&
        !options.checkpoint_dir.empty()) {
      save_model(model, options.checkpoint_dir / (step_name(step + 1) + ".ckpt"));
    }
  }
  model.metadata["steps"] = std::to_string(steps);
  return run;
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

template <typename T>
struct Stage2Run {
  Router<T> router;
  ExpertRegistry<T> registry;  // unchanged for learned_avg
  std::vector<StepLog> log;
};

/// What one stage-2 step applied: the L2 norm of the update gradient per expert
/// (exactly 0 for every frozen expert) and the router's.
struct Stage2Batch {
  std::size_t step = 0;
  int year = 0;
  std::size_t rows = 0;
  std::vector<double> expert_grad_norms;
  double router_grad_norm = 0;
};

struct Stage2Options {
  std::size_t batch_size = 8;
  std::size_t token_budget = 200'000;
  LrPolicy lr = LrPolicy::constant(1e-5);
  AdamWOptions adam;
  std::uint64_t seed = 0;
  std::function<void(const StepLog&)> on_step;
  std::function<void(const Stage2Batch&)> on_batch;
};

namespace detail {

template <typename T>
double l2(const std::vector<T>& v) {
  double s = 0;
  for (auto x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

/// Batches that never mix doc_years, so one mask (and for coadapt one expert) applies per batch.
struct YearBatch {
  int year = 0;
  std::vector<const TokenId*> rows;
};

inline std::vector<YearBatch> year_batches(const std::map<int, std::vector<const TokenId*>>& by_year,
                                           std::size_t batch_size, std::mt19937_64& rng) {
  std::vector<YearBatch> out;
  for (const auto& [year, rows] : by_year) {
    auto shuffled = rows;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (std::size_t i = 0; i < shuffled.size(); i += batch_size) {
      YearBatch b{year, {}};
      b.rows.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(i),
                    shuffled.begin() + static_cast<std::ptrdiff_t>(std::min(i + batch_size, shuffled.size())));
      out.push_back(std::move(b));
    }
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace detail

/// Stage 2: train the router (learned_avg) or the router plus, per batch, the expert
/// containing the batch's doc_year (coadapt). Other experts never get a backward pass.
template <typename T>
Stage2Run<T> train_stage2(const ExpertRegistry<T>& registry, Strategy<T> strategy, std::span<const Shard> shards,
                          const Stage2Options& options) {
  require(strategy.kind == StrategyKind::learned_avg || strategy.kind == StrategyKind::coadapt,
          ErrorCode::InvalidConfig, "stage 2 trains learned_avg or coadapt");
  strategy.validate(registry.size());
  require(options.batch_size > 0, ErrorCode::InvalidConfig, "batch_size must be positive");

  std::map<int, std::vector<const TokenId*>> by_year;
  std::size_t row_length = 0;
  for (const auto& s : shards) {
    require(s.header.tokenizer_hash == registry.tokenizer_hash(), ErrorCode::TokenizerMismatch,
            "shard tokenizer differs from the registry's");
    require(row_length == 0 || s.header.length == row_length, ErrorCode::ShapeMismatch, "shards differ in row length");
    row_length = s.header.length;
    for (std::size_t r = 0; r < s.batch.rows(); ++r) {
      const int year = s.batch.doc_year[r];
      require(year >= registry.earliest_year(), ErrorCode::NoEligibleExpert,
              "row from " + std::to_string(year) + " predates every expert");
      require(year <= registry.latest_year(), ErrorCode::OutOfRange,
              "row from " + std::to_string(year) + " is past the registry");
      by_year[year].push_back(s.batch.tokens.data() + r * row_length);
    }
  }
  require(!by_year.empty(), ErrorCode::EmptyBin, "no stage-2 rows");
  require(row_length - 1 <= registry.context_length(), ErrorCode::ContextOverflow, "row length exceeds context");

  Stage2Run<T> run{*strategy.router, registry, {}};
  const bool coadapt = strategy.kind == StrategyKind::coadapt;
  AdamW<T> router_adam(run.router.params.size(), options.adam, decay_mask(run.router));
  std::vector<std::optional<AdamW<T>>> expert_adam(registry.size());

  const std::size_t steps = TrainOptions{options.batch_size, options.token_budget}.steps_for(row_length);
  const auto schedule = options.lr.resolve(steps);
  std::mt19937_64 rng(options.seed);
  std::vector<detail::YearBatch> batches;
  std::size_t cursor = 0;
  std::size_t tokens_seen = 0;
  std::vector<TokenId> tokens;

  for (std::size_t step = 0; step < steps; ++step) {
    if (cursor == batches.size()) {
      batches = detail::year_batches(by_year, options.batch_size, rng);
      cursor = 0;
    }
    const auto& batch = batches[cursor++];
    tokens.resize(batch.rows.size() * row_length);
    for (std::size_t b = 0; b < batch.rows.size(); ++b) {
      std::copy_n(batch.rows[b], row_length, tokens.begin() + static_cast<std::ptrdiff_t>(b * row_length));
    }
    std::vector<bool> trainable(registry.size(), false);
    std::size_t owner = 0;
    if (coadapt) {
      owner = run.registry.containing(batch.year);
      trainable[owner] = true;
    }
    strategy.router = run.router;
    auto res = mixture_loss_and_grads(run.registry, strategy, RowView{tokens, batch.rows.size(), row_length},
                                      batch.year, trainable);
    std::vector<std::vector<T>*> groups{&res.router_grads};
    if (coadapt) groups.push_back(&res.expert_grads[owner]);
    clip_global_norm<T>(groups, options.adam.grad_clip);

    const double lr = lr_at(schedule, step);
    router_adam.step(run.router.params, res.router_grads, lr);
    if (coadapt) {
      auto model = run.registry.expert(owner);
      if (!expert_adam[owner]) expert_adam[owner].emplace(model.params.size(), options.adam, decay_mask(model.layout));
      expert_adam[owner]->step(model.params, res.expert_grads[owner], lr);
      run.registry = run.registry.with_model(owner, std::move(model));
    }
    if (options.on_batch) {
      Stage2Batch info{step, batch.year, batch.rows.size(), std::vector<double>(registry.size(), 0.0),
                       detail::l2(res.router_grads)};
      for (std::size_t k = 0; k < registry.size(); ++k) {
        if (!res.expert_grads[k].empty()) info.expert_grad_norms[k] = detail::l2(res.expert_grads[k]);
      }
      options.on_batch(info);
    }
    tokens_seen += batch.rows.size() * (row_length - 1);
    StepLog entry{step, lr, static_cast<double>(res.loss), tokens_seen};
    if (options.on_step) options.on_step(entry);
    run.log.push_back(entry);
  }
  return run;
}

}  // namespace timoe
