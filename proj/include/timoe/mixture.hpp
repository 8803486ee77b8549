#pragma once

// Time-masked mixture of experts in log-probability space:
//
//   log P(x_{t+1} | x_{1:t}) = log sum_{k in E(t_q)} w_k(x) * exp(log P_k(x_{t+1} | x_{1:t}))
//
// with w_k >= 0, sum_k w_k = 1 over the eligible set E(t_q) and w_k = 0 exactly
// for every other expert. Ineligible experts are never evaluated.

#include <cmath>
#include <future>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "timoe/checkpoint.hpp"
#include "timoe/error.hpp"
#include "timoe/lm.hpp"
#include "timoe/temporal.hpp"

namespace timoe {

enum class StrategyKind { year, avg, learned_avg, coadapt };

inline std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::year: return "year";
    case StrategyKind::avg: return "avg";
    case StrategyKind::learned_avg: return "learned_avg";
    case StrategyKind::coadapt: return "coadapt";
  }
  return "?";
}

inline StrategyKind strategy_from_string(std::string_view s) {
  if (s == "year") return StrategyKind::year;
  if (s == "avg") return StrategyKind::avg;
  if (s == "learned_avg" || s == "learned") return StrategyKind::learned_avg;
  if (s == "coadapt") return StrategyKind::coadapt;
  fail(ErrorCode::ConfigError, "unknown strategy '" + std::string(s) + "'");
}

inline bool uses_router(StrategyKind k) { return k == StrategyKind::learned_avg || k == StrategyKind::coadapt; }

/// Which hidden state feeds the router at each position.
enum class RouterInput { latest_eligible, mean_eligible };

struct RouterConfig {
  std::size_t d_model = 0;
  std::size_t n_experts = 0;
  std::size_t hidden = 0;  // 0: single affine map; >0: one tanh hidden layer of this width
  RouterInput input = RouterInput::latest_eligible;

  nlohmann::json to_json() const {
    return {{"d_model", d_model},
            {"n_experts", n_experts},
            {"hidden", hidden},
            {"input", input == RouterInput::latest_eligible ? "latest_eligible" : "mean_eligible"}};
  }

  static RouterConfig from_json(const nlohmann::json& j) {
    RouterConfig c;
    for (const auto& [key, value] : j.items()) {
      if (key == "d_model") c.d_model = value.get<std::size_t>();
      else if (key == "n_experts") c.n_experts = value.get<std::size_t>();
      else if (key == "hidden") c.hidden = value.get<std::size_t>();
      else if (key == "input") {
        auto s = value.get<std::string>();
        require(s == "latest_eligible" || s == "mean_eligible", ErrorCode::ConfigError, "router input '" + s + "'");
        c.input = s == "latest_eligible" ? RouterInput::latest_eligible : RouterInput::mean_eligible;
      } else {
        fail(ErrorCode::ConfigError, "unknown router config key '" + key + "'");
      }
    }
    return c;
  }
};

/// Affine router d_model -> n_experts (optionally through one tanh hidden layer),
/// parameters flat as [W1, b1, (W2, b2)]; weights are stored (in, out).
template <typename T>
struct Router {
  RouterConfig config;
  std::vector<T> params;

  std::size_t out_in() const { return config.hidden ? config.hidden : config.n_experts; }
  std::size_t w1() const { return 0; }
  std::size_t b1() const { return config.d_model * out_in(); }
  std::size_t w2() const { return b1() + out_in(); }
  std::size_t b2() const { return w2() + config.hidden * config.n_experts; }
  std::size_t num_params() const { return config.hidden ? b2() + config.n_experts : b1() + config.n_experts; }
};

/// The output layer starts at zero so an untrained router weighs eligible experts
/// uniformly; a hidden layer, if any, is drawn from N(0, 0.02) with `seed`.
template <typename T>
Router<T> make_router(const RouterConfig& cfg, std::uint64_t seed = 0) {
  require(cfg.d_model > 0 && cfg.n_experts > 0, ErrorCode::InvalidConfig, "router dimensions must be positive");
  Router<T> r{cfg, {}};
  r.params.assign(r.num_params(), T(0));
  if (cfg.hidden) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    for (std::size_t i = 0; i < cfg.d_model * cfg.hidden; ++i) r.params[r.w1() + i] = static_cast<T>(normal(rng));
  }
  return r;
}

template <typename T>
struct Strategy {
  StrategyKind kind = StrategyKind::avg;
  std::optional<Router<T>> router;
  EligibilityRule rule = EligibilityRule::containing;

  void validate(std::size_t n_experts) const {
    require(uses_router(kind) == router.has_value(), ErrorCode::InvalidConfig,
            "strategy " + to_string(kind) + (router ? " does not take" : " requires") + " a router");
    if (router) {
      require(router->config.n_experts == n_experts, ErrorCode::InvalidConfig,
              "router expects " + std::to_string(router->config.n_experts) + " experts, registry has " +
                  std::to_string(n_experts));
      for (auto v : router->params) require(std::isfinite(v), ErrorCode::InvalidConfig, "non-finite router weight");
    }
  }
};

// ---------------------------------------------------------------------------
// Kernel
// ---------------------------------------------------------------------------

/// out[p, v] = log sum_k weights[p, k] * exp(expert_logprobs[k][p, v]).
/// Experts whose weight is zero at a position are skipped, so their span may be
/// empty. Uses the running maximum over contributing experts as the shift.
template <typename T>
void mix_into(std::span<T> out, std::span<const std::span<const T>> expert_logprobs, std::span<const T> weights,
              std::size_t positions, std::size_t vocab) {
  const std::size_t K = expert_logprobs.size();
  require(weights.size() == positions * K, ErrorCode::ShapeMismatch, "weights shape");
  require(out.size() == positions * vocab, ErrorCode::ShapeMismatch, "output shape");
  for (std::size_t k = 0; k < K; ++k) {
    bool used = false;
    for (std::size_t p = 0; p < positions && !used; ++p) used = weights[p * K + k] != T(0);
    require(!used || expert_logprobs[k].size() == positions * vocab, ErrorCode::ShapeMismatch,
            "expert " + std::to_string(k) + " logprob shape");
  }
  for (std::size_t p = 0; p < positions; ++p) {
    const T* w = weights.data() + p * K;
    T total = 0;
    for (std::size_t k = 0; k < K; ++k) {
      require(w[k] >= T(0), ErrorCode::DegenerateWeights, "negative weight");
      total += w[k];
    }
    require(total > T(0), ErrorCode::DegenerateWeights, "all weights are zero at position " + std::to_string(p));
    T* o = out.data() + p * vocab;
    for (std::size_t v = 0; v < vocab; ++v) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < K; ++k) {
        if (w[k] != T(0)) m = std::max(m, expert_logprobs[k][p * vocab + v]);
      }
      if (m == -std::numeric_limits<T>::infinity()) {
        o[v] = m;
        continue;
      }
      T s = 0;
      for (std::size_t k = 0; k < K; ++k) {
        if (w[k] != T(0)) s += w[k] * std::exp(expert_logprobs[k][p * vocab + v] - m);
      }
      o[v] = m + std::log(s);
    }
  }
}

template <typename T>
std::vector<T> mix(std::span<const std::span<const T>> expert_logprobs, std::span<const T> weights,
                   std::size_t positions, std::size_t vocab) {
  std::vector<T> out(positions * vocab);
  mix_into<T>(out, expert_logprobs, weights, positions, vocab);
  return out;
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

namespace detail {

// Router pre-softmax logits at one position; `act` receives the hidden activations.
template <typename T>
void router_logits(const Router<T>& r, const T* h, T* z, T* act) {
  const auto& c = r.config;
  const std::size_t first = r.out_in();
  const T* W1 = r.params.data() + r.w1();
  const T* b1 = r.params.data() + r.b1();
  T* stage = c.hidden ? act : z;
  for (std::size_t j = 0; j < first; ++j) stage[j] = b1[j];
  for (std::size_t i = 0; i < c.d_model; ++i) {
    for (std::size_t j = 0; j < first; ++j) stage[j] += h[i] * W1[i * first + j];
  }
  if (!c.hidden) return;
  for (std::size_t j = 0; j < c.hidden; ++j) act[j] = std::tanh(act[j]);
  const T* W2 = r.params.data() + r.w2();
  const T* b2 = r.params.data() + r.b2();
  for (std::size_t k = 0; k < c.n_experts; ++k) z[k] = b2[k];
  for (std::size_t j = 0; j < c.hidden; ++j) {
    for (std::size_t k = 0; k < c.n_experts; ++k) z[k] += act[j] * W2[j * c.n_experts + k];
  }
}

// Softmax restricted to eligible entries; the rest are exactly zero.
template <typename T>
void masked_softmax(const T* z, const std::vector<bool>& eligible, T* w) {
  const std::size_t K = eligible.size();
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t k = 0; k < K; ++k) {
    if (eligible[k]) m = std::max(m, z[k]);
  }
  T s = 0;
  for (std::size_t k = 0; k < K; ++k) {
    w[k] = eligible[k] ? std::exp(z[k] - m) : T(0);
    s += w[k];
  }
  for (std::size_t k = 0; k < K; ++k) w[k] /= s;
}

}  // namespace detail

/// Per-position weights (positions, n_experts). `hidden` is (positions, d_model) and
/// is required exactly when the strategy uses a router.
template <typename T>
std::vector<T> compute_weights(const Strategy<T>& strategy, const EligibilityMask& mask, std::span<const T> hidden,
                               std::size_t positions, std::optional<std::size_t> containing = std::nullopt) {
  const std::size_t K = mask.eligible.size();
  const std::size_t n_eligible = mask.count();
  require(n_eligible > 0, ErrorCode::NoEligibleExpert, "no eligible expert");
  std::vector<T> w(positions * K, T(0));
  switch (strategy.kind) {
    case StrategyKind::year: {
      require(containing.has_value(), ErrorCode::OutOfRange, "year strategy needs the containing expert");
      for (std::size_t p = 0; p < positions; ++p) w[p * K + *containing] = T(1);
      break;
    }
    case StrategyKind::avg: {
      const T u = T(1) / static_cast<T>(n_eligible);
      for (std::size_t p = 0; p < positions; ++p) {
        for (std::size_t k = 0; k < K; ++k) w[p * K + k] = mask.eligible[k] ? u : T(0);
      }
      break;
    }
    case StrategyKind::learned_avg:
    case StrategyKind::coadapt: {
      require(strategy.router.has_value(), ErrorCode::InvalidConfig, "strategy requires a router");
      const auto& r = *strategy.router;
      require(r.config.n_experts == K, ErrorCode::ShapeMismatch, "router / registry size mismatch");
      require(hidden.size() == positions * r.config.d_model, ErrorCode::MissingHidden,
              "router strategy needs hidden states");
      std::vector<T> z(K), act(r.config.hidden);
      for (std::size_t p = 0; p < positions; ++p) {
        detail::router_logits(r, hidden.data() + p * r.config.d_model, z.data(), act.data());
        detail::masked_softmax(z.data(), mask.eligible, w.data() + p * K);
      }
      break;
    }
  }
  return w;
}

template <typename T>
struct MixtureOutput {
  std::size_t batch = 0, time = 0, vocab = 0, n_experts = 0;
  std::vector<T> logprobs;  // (batch, time, vocab)
  std::vector<T> weights;   // (batch, time, n_experts)

  std::span<const T> logprobs_at(std::size_t b, std::size_t t) const {
    return {logprobs.data() + (b * time + t) * vocab, vocab};
  }
  std::span<const T> weights_at(std::size_t b, std::size_t t) const {
    return {weights.data() + (b * time + t) * n_experts, n_experts};
  }
};

namespace detail {

/// Forward passes of the listed experts; slot k stays empty for experts not listed.
/// Each pass writes only its own slot, so the result does not depend on `threads`.
template <typename T>
std::vector<std::optional<ForwardOutput<T>>> run_experts(const ExpertRegistry<T>& registry,
                                                         const std::vector<bool>& which,
                                                         std::span<const TokenId> tokens, std::size_t batch,
                                                         std::size_t time, std::size_t threads,
                                                         std::vector<ForwardCache<T>>* caches = nullptr) {
  std::vector<std::optional<ForwardOutput<T>>> outs(registry.size());
  if (caches) caches->assign(registry.size(), {});
  auto run = [&](std::size_t k) {
    ForwardCache<T> cache;
    outs[k] = forward(registry.expert(k), tokens, batch, time, cache);
    if (caches) (*caches)[k] = std::move(cache);
  };
  if (threads <= 1) {
    for (std::size_t k = 0; k < registry.size(); ++k) {
      if (which[k]) run(k);
    }
  } else {
    std::vector<std::future<void>> pending;
    for (std::size_t k = 0; k < registry.size(); ++k) {
      if (which[k]) pending.push_back(std::async(std::launch::async, run, k));
    }
    for (auto& f : pending) f.get();
  }
  return outs;
}

/// Router input per position: the latest eligible expert's hidden state or the mean
/// over eligible experts, summed in expert-index order.
template <typename T>
std::vector<T> router_input(const std::vector<std::optional<ForwardOutput<T>>>& outs, const EligibilityMask& mask,
                            RouterInput source) {
  if (source == RouterInput::latest_eligible) return outs[mask.latest()]->hidden;
  std::vector<T> h(outs[mask.latest()]->hidden.size(), T(0));
  const T inv = T(1) / static_cast<T>(mask.count());
  for (std::size_t k = 0; k < outs.size(); ++k) {
    if (!mask.eligible[k]) continue;
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += outs[k]->hidden[i];
  }
  for (auto& v : h) v *= inv;
  return h;
}

}  // namespace detail

/// Full inference path: masks by `query_year` (latest registry year when absent),
/// evaluates eligible experts only and mixes. The year strategy returns the
/// containing expert's output unchanged with one-hot weights.
template <typename T>
MixtureOutput<T> predict(const ExpertRegistry<T>& registry, const Strategy<T>& strategy,
                         std::span<const TokenId> tokens, std::size_t batch, std::size_t time,
                         std::optional<int> query_year, std::size_t threads = 1) {
  strategy.validate(registry.size());
  const int year = registry.resolve_year(query_year);
  const std::size_t K = registry.size();
  const std::size_t P = batch * time;
  MixtureOutput<T> out{batch, time, registry.vocab_size(), K, {}, {}};

  if (strategy.kind == StrategyKind::year) {
    const auto k = registry.containing(year);
    out.logprobs = forward(registry.expert(k), tokens, batch, time).logprobs;
    out.weights.assign(P * K, T(0));
    for (std::size_t p = 0; p < P; ++p) out.weights[p * K + k] = T(1);
    return out;
  }

  const auto mask = registry.eligible(year, strategy.rule);
  auto outs = detail::run_experts(registry, mask.eligible, tokens, batch, time, threads);
  std::vector<T> hidden;
  if (strategy.router) hidden = detail::router_input(outs, mask, strategy.router->config.input);
  out.weights = compute_weights<T>(strategy, mask, hidden, P);

  std::vector<std::span<const T>> lps(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (outs[k]) lps[k] = outs[k]->logprobs;
  }
  out.logprobs.resize(P * out.vocab);
  mix_into<T>(out.logprobs, lps, out.weights, P, out.vocab);
  return out;
}

// ---------------------------------------------------------------------------
// Mixture NLL and exact gradients (stage-2 objective)
// ---------------------------------------------------------------------------

template <typename T>
struct MixtureLossGrads {
  T loss = 0;
  std::vector<T> router_grads;               // empty without a router
  std::vector<std::vector<T>> expert_grads;  // per registry index; empty unless requested
  std::vector<T> weights;                    // (positions, n_experts)
};

/// Mean next-token NLL of the mixed distribution over `rows`, all sharing `query_year`.
/// Gradients are produced for the router (if any) and for experts flagged in
/// `expert_grads_for`; every other expert receives no backward pass at all.
template <typename T>
MixtureLossGrads<T> mixture_loss_and_grads(const ExpertRegistry<T>& registry, const Strategy<T>& strategy,
                                           const RowView& rows, int query_year,
                                           const std::vector<bool>& expert_grads_for = {}) {
  strategy.validate(registry.size());
  require(strategy.kind != StrategyKind::year, ErrorCode::InvalidConfig, "year strategy has nothing to train");
  const std::size_t K = registry.size();
  std::vector<bool> want(K, false);
  for (std::size_t k = 0; k < expert_grads_for.size() && k < K; ++k) want[k] = expert_grads_for[k];

  auto split = detail::split_rows(rows);
  const std::size_t B = rows.rows, Tn = split.time, P = B * Tn;
  const std::size_t V = registry.vocab_size(), C = registry.d_model();
  const auto mask = registry.eligible(query_year, strategy.rule);
  for (std::size_t k = 0; k < K; ++k) {
    require(!want[k] || mask.eligible[k], ErrorCode::NoEligibleExpert,
            "gradient requested for ineligible expert " + std::to_string(k));
  }

  std::vector<ForwardCache<T>> caches;
  auto outs = detail::run_experts(registry, mask.eligible, split.inputs, B, Tn, 1, &caches);
  std::vector<T> hidden;
  if (strategy.router) hidden = detail::router_input(outs, mask, strategy.router->config.input);

  MixtureLossGrads<T> res;
  res.weights = compute_weights<T>(strategy, mask, hidden, P);
  const T inv = T(1) / static_cast<T>(P);

  std::vector<std::vector<T>> dlp(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (want[k]) dlp[k].assign(P * V, T(0));
  }
  std::vector<T> dz(P * K, T(0));
  T total = 0;
  for (std::size_t p = 0; p < P; ++p) {
    const TokenId y = split.targets[p];
    const T* w = res.weights.data() + p * K;
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      if (w[k] != T(0)) m = std::max(m, outs[k]->logprobs[p * V + y]);
    }
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) {
      if (w[k] != T(0)) s += w[k] * std::exp(outs[k]->logprobs[p * V + y] - m);
    }
    const T mixed = m + std::log(s);
    total -= mixed;
    for (std::size_t k = 0; k < K; ++k) {
      if (!mask.eligible[k]) continue;
      // posterior responsibility of expert k for the observed token
      const T r = w[k] == T(0) ? T(0) : w[k] * std::exp(outs[k]->logprobs[p * V + y] - mixed);
      if (want[k]) dlp[k][p * V + y] = -r * inv;
      dz[p * K + k] = (w[k] - r) * inv;
    }
  }
  res.loss = total * inv;

  std::vector<std::vector<T>> dhidden(K);
  if (strategy.router) {
    const auto& r = *strategy.router;
    const auto& c = r.config;
    res.router_grads.assign(r.num_params(), T(0));
    T* g = res.router_grads.data();
    std::vector<T> dh_src(P * C, T(0));
    std::vector<T> z(K), act(c.hidden), dact(c.hidden);
    for (std::size_t p = 0; p < P; ++p) {
      const T* h = hidden.data() + p * C;
      const T* d = dz.data() + p * K;
      T* dh = dh_src.data() + p * C;
      if (!c.hidden) {
        const T* W = r.params.data() + r.w1();
        for (std::size_t i = 0; i < C; ++i) {
          T acc = 0;
          for (std::size_t k = 0; k < K; ++k) {
            g[r.w1() + i * K + k] += h[i] * d[k];
            acc += W[i * K + k] * d[k];
          }
          dh[i] = acc;
        }
        for (std::size_t k = 0; k < K; ++k) g[r.b1() + k] += d[k];
      } else {
        detail::router_logits(r, h, z.data(), act.data());
        const T* W1 = r.params.data() + r.w1();
        const T* W2 = r.params.data() + r.w2();
        for (std::size_t j = 0; j < c.hidden; ++j) {
          T acc = 0;
          for (std::size_t k = 0; k < K; ++k) {
            g[r.w2() + j * K + k] += act[j] * d[k];
            acc += W2[j * K + k] * d[k];
          }
          dact[j] = acc * (T(1) - act[j] * act[j]);
        }
        for (std::size_t k = 0; k < K; ++k) g[r.b2() + k] += d[k];
        for (std::size_t i = 0; i < C; ++i) {
          T acc = 0;
          for (std::size_t j = 0; j < c.hidden; ++j) {
            g[r.w1() + i * c.hidden + j] += h[i] * dact[j];
            acc += W1[i * c.hidden + j] * dact[j];
          }
          dh[i] = acc;
        }
        for (std::size_t j = 0; j < c.hidden; ++j) g[r.b1() + j] += dact[j];
      }
    }
    if (c.input == RouterInput::latest_eligible) {
      const auto src = mask.latest();
      if (want[src]) dhidden[src] = std::move(dh_src);
    } else {
      const T share = T(1) / static_cast<T>(mask.count());
      for (std::size_t k = 0; k < K; ++k) {
        if (!want[k]) continue;
        dhidden[k] = dh_src;
        for (auto& v : dhidden[k]) v *= share;
      }
    }
  }

  res.expert_grads.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (!want[k]) continue;
    res.expert_grads[k] = backward(registry.expert(k), caches[k], std::span<const T>(dlp[k]),
                                   std::span<const T>(dhidden[k]));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Router persistence: same tensor file format as experts.
// ---------------------------------------------------------------------------

template <typename T>
void save_router(const Router<T>& router, StrategyKind kind, const Digest& registry_identity,
                 const std::filesystem::path& path) {
  TensorFile file;
  file.manifest = {{"kind", "router"},
                   {"strategy", to_string(kind)},
                   {"registry_hash", to_hex(registry_identity)},
                   {"router", router.config.to_json()}};
  file.tensors.push_back({"router.params", {router.params.size()}, std::vector<float>(router.params.begin(), router.params.end())});
  io::write_file(path, encode_tensor_file(file));
}

template <typename T>
struct LoadedRouter {
  Router<T> router;
  StrategyKind kind = StrategyKind::learned_avg;
  Digest registry_identity{};
};

template <typename T>
LoadedRouter<T> load_router(const std::filesystem::path& path) {
  auto file = decode_tensor_file(io::read_file(path));
  require(file.manifest.value("kind", "") == "router", ErrorCode::ParseError, "not a router checkpoint");
  LoadedRouter<T> out;
  out.router.config = RouterConfig::from_json(file.manifest.at("router"));
  out.kind = strategy_from_string(file.manifest.at("strategy").get<std::string>());
  out.registry_identity = digest_from_hex(file.manifest.at("registry_hash").get<std::string>());
  require(file.tensors.size() == 1 && file.tensors[0].data.size() == out.router.num_params(), ErrorCode::ParseError,
          "router tensor size mismatch");
  out.router.params.assign(file.tensors[0].data.begin(), file.tensors[0].data.end());
  return out;
}

}  // namespace timoe
