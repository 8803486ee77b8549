#pragma once

// GPT-2 style decoder-only expert: pre-norm blocks, learned positional
// embeddings, causal multi-head attention, GELU MLP (4x), final layer norm and
// an output projection tied to the token embedding by default.
//
// All parameters live in one flat buffer described by a ParamLayout, so
// gradients, optimizer state and checkpoints share the same indexing.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "timoe/corpus.hpp"
#include "timoe/error.hpp"
#include "timoe/hash.hpp"

namespace timoe {

struct ExpertConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t context_length = 256;
  std::size_t vocab_size = Tokenizer::kByteVocab;
  double dropout = 0.0;
  bool tie_weights = true;
  std::uint64_t seed = 0;

  /// 2 layers, 2 heads, d_model 16, context 32, byte vocabulary.
  static ExpertConfig micro() {
    ExpertConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 16;
    c.context_length = 32;
    return c;
  }

  void validate() const {
    require(n_layers >= 1, ErrorCode::InvalidConfig, "n_layers must be >= 1");
    require(n_heads >= 1, ErrorCode::InvalidConfig, "n_heads must be >= 1");
    require(d_model >= 1 && d_model % n_heads == 0, ErrorCode::InvalidConfig,
            "d_model must be divisible by n_heads");
    require(context_length >= 2, ErrorCode::InvalidConfig, "context_length must be >= 2");
    require(vocab_size >= 2, ErrorCode::InvalidConfig, "vocab_size must be >= 2");
    require(dropout >= 0.0 && dropout < 1.0, ErrorCode::InvalidConfig, "dropout must be in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"n_layers", n_layers},     {"n_heads", n_heads}, {"d_model", d_model},
            {"context_length", context_length}, {"vocab_size", vocab_size}, {"dropout", dropout},
            {"tie_weights", tie_weights}, {"seed", seed}};
  }

  /// Missing keys keep their defaults; unknown keys are rejected.
  static ExpertConfig from_json(const nlohmann::json& j, ExpertConfig base) {
    require(j.is_object(), ErrorCode::ConfigError, "model config must be an object");
    for (const auto& [key, value] : j.items()) {
      if (key == "n_layers") base.n_layers = value.get<std::size_t>();
      else if (key == "n_heads") base.n_heads = value.get<std::size_t>();
      else if (key == "d_model") base.d_model = value.get<std::size_t>();
      else if (key == "context_length") base.context_length = value.get<std::size_t>();
      else if (key == "vocab_size") base.vocab_size = value.get<std::size_t>();
      else if (key == "dropout") base.dropout = value.get<double>();
      else if (key == "tie_weights") base.tie_weights = value.get<bool>();
      else if (key == "seed") base.seed = value.get<std::uint64_t>();
      else fail(ErrorCode::ConfigError, "unknown model config key '" + key + "'");
    }
    return base;
  }

  static ExpertConfig from_json(const nlohmann::json& j) { return from_json(j, ExpertConfig{}); }

  friend bool operator==(const ExpertConfig&, const ExpertConfig&) = default;
};

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool decay = false;  // weight decay applies to matrices only
};

/// Element offsets of every parameter tensor inside the flat buffer.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_w, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_w, ln2_b, fc_w, fc_b, fcproj_w, fcproj_b;
  };

  std::vector<TensorSpec> tensors;
  std::size_t total = 0;
  std::size_t wte = 0, wpe = 0, lnf_w = 0, lnf_b = 0, lm_head = 0;
  std::vector<Layer> layers;

  const TensorSpec& find(std::string_view name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    fail(ErrorCode::InvalidConfig, "no tensor named " + std::string(name));
  }

  static ParamLayout build(const ExpertConfig& cfg) {
    cfg.validate();
    ParamLayout l;
    const auto C = cfg.d_model, V = cfg.vocab_size, L = cfg.context_length;
    auto add = [&](std::string name, std::vector<std::size_t> shape) {
      std::size_t n = 1;
      for (auto d : shape) n *= d;
      bool decay = shape.size() >= 2;
      l.tensors.push_back({std::move(name), std::move(shape), l.total, n, decay});
      l.total += n;
      return l.tensors.back().offset;
    };
    l.wte = add("wte", {V, C});
    l.wpe = add("wpe", {L, C});
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      const std::string p = "h." + std::to_string(i) + ".";
      Layer ly{};
      ly.ln1_w = add(p + "ln_1.weight", {C});
      ly.ln1_b = add(p + "ln_1.bias", {C});
      ly.qkv_w = add(p + "attn.c_attn.weight", {C, 3 * C});
      ly.qkv_b = add(p + "attn.c_attn.bias", {3 * C});
      ly.proj_w = add(p + "attn.c_proj.weight", {C, C});
      ly.proj_b = add(p + "attn.c_proj.bias", {C});
      ly.ln2_w = add(p + "ln_2.weight", {C});
      ly.ln2_b = add(p + "ln_2.bias", {C});
      ly.fc_w = add(p + "mlp.c_fc.weight", {C, 4 * C});
      ly.fc_b = add(p + "mlp.c_fc.bias", {4 * C});
      ly.fcproj_w = add(p + "mlp.c_proj.weight", {4 * C, C});
      ly.fcproj_b = add(p + "mlp.c_proj.bias", {C});
      l.layers.push_back(ly);
    }
    l.lnf_w = add("ln_f.weight", {C});
    l.lnf_b = add("ln_f.bias", {C});
    l.lm_head = cfg.tie_weights ? l.wte : add("lm_head.weight", {V, C});
    return l;
  }
};

template <typename T>
struct Model {
  ExpertConfig config;
  ParamLayout layout;
  std::vector<T> params;
  TimeWindow window;
  Digest tokenizer_hash{};
  std::map<std::string, std::string> metadata;

  std::size_t num_params() const { return params.size(); }
  const T* at(std::size_t offset) const { return params.data() + offset; }
  T* at(std::size_t offset) { return params.data() + offset; }
};

/// Deterministic in (config, seed): N(0, 0.02) weights, residual projections
/// scaled by 1/sqrt(2 * n_layers), zero biases, unit layer-norm gains.
template <typename T>
Model<T> init_model(const ExpertConfig& cfg, TimeWindow window = {}, Digest tokenizer_hash = {}) {
  Model<T> m;
  m.config = cfg;
  m.layout = ParamLayout::build(cfg);
  m.params.assign(m.layout.total, T(0));
  m.window = std::move(window);
  m.tokenizer_hash = tokenizer_hash;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual_std = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  for (const auto& spec : m.layout.tensors) {
    T* p = m.params.data() + spec.offset;
    const bool is_gain = spec.name.ends_with("ln_1.weight") || spec.name.ends_with("ln_2.weight") ||
                         spec.name == "ln_f.weight";
    if (is_gain) {
      std::fill(p, p + spec.size, T(1));
    } else if (spec.shape.size() >= 2) {
      const bool residual = spec.name.ends_with("attn.c_proj.weight") || spec.name.ends_with("mlp.c_proj.weight");
      const double std = residual ? residual_std : 0.02;
      for (std::size_t i = 0; i < spec.size; ++i) p[i] = static_cast<T>(std * normal(rng));
    }
  }
  return m;
}

template <typename To, typename From>
Model<To> convert_model(const Model<From>& src) {
  Model<To> m;
  m.config = src.config;
  m.layout = src.layout;
  m.params.assign(src.params.begin(), src.params.end());
  m.window = src.window;
  m.tokenizer_hash = src.tokenizer_hash;
  m.metadata = src.metadata;
  return m;
}

template <typename T>
struct ForwardOutput {
  std::size_t batch = 0, time = 0, vocab = 0, d_model = 0;
  std::vector<T> logprobs;  // (batch, time, vocab); row t predicts token t+1
  std::vector<T> hidden;    // (batch, time, d_model) after the final layer norm

  std::span<const T> logprobs_at(std::size_t b, std::size_t t) const {
    return {logprobs.data() + (b * time + t) * vocab, vocab};
  }
  std::span<const T> hidden_at(std::size_t b, std::size_t t) const {
    return {hidden.data() + (b * time + t) * d_model, d_model};
  }
};

struct ForwardOptions {
  bool training = false;       // enables dropout when config.dropout > 0
  std::uint64_t dropout_seed = 0;
};

template <typename T>
struct LayerActivations {
  std::vector<T> x_in, ln1, ln1_mean, ln1_rstd, qkv, att, atty, x_mid, ln2, ln2_mean, ln2_rstd, fc, gelu;
  std::vector<T> mask1, mask2;  // inverted-dropout masks, empty when dropout is off
};

/// Activations retained by forward for the backward pass.
template <typename T>
struct ForwardCache {
  std::size_t batch = 0, time = 0;
  std::vector<TokenId> tokens;
  std::vector<LayerActivations<T>> layers;
  std::vector<T> x_final, lnf_mean, lnf_rstd;
  std::vector<T> probs;  // softmax of logits, (batch, time, vocab)
};

namespace detail {

template <typename T>
constexpr T kGeluScale = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)

template <typename T>
void layernorm_forward(T* out, T* mean, T* rstd, const T* inp, const T* w, const T* b, std::size_t N,
                       std::size_t C) {
  const T eps = static_cast<T>(1e-5);
  for (std::size_t n = 0; n < N; ++n) {
    const T* x = inp + n * C;
    T m = 0;
    for (std::size_t i = 0; i < C; ++i) m += x[i];
    m /= static_cast<T>(C);
    T v = 0;
    for (std::size_t i = 0; i < C; ++i) {
      T d = x[i] - m;
      v += d * d;
    }
    v /= static_cast<T>(C);
    T s = T(1) / std::sqrt(v + eps);
    T* o = out + n * C;
    for (std::size_t i = 0; i < C; ++i) o[i] = (x[i] - m) * s * w[i] + b[i];
    mean[n] = m;
    rstd[n] = s;
  }
}

template <typename T>
void layernorm_backward(T* dinp, T* dw, T* db, const T* dout, const T* inp, const T* w, const T* mean,
                        const T* rstd, std::size_t N, std::size_t C) {
  for (std::size_t n = 0; n < N; ++n) {
    const T* x = inp + n * C;
    const T* dy = dout + n * C;
    T dnorm_mean = 0, dnorm_norm_mean = 0;
    for (std::size_t i = 0; i < C; ++i) {
      T norm = (x[i] - mean[n]) * rstd[n];
      T dnorm = w[i] * dy[i];
      dnorm_mean += dnorm;
      dnorm_norm_mean += dnorm * norm;
    }
    dnorm_mean /= static_cast<T>(C);
    dnorm_norm_mean /= static_cast<T>(C);
    T* dx = dinp + n * C;
    for (std::size_t i = 0; i < C; ++i) {
      T norm = (x[i] - mean[n]) * rstd[n];
      T dnorm = w[i] * dy[i];
      if (dw) dw[i] += norm * dy[i];
      if (db) db[i] += dy[i];
      dx[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * rstd[n];
    }
  }
}

// out[n, o] = bias[o] + sum_i inp[n, i] * w[i, o]
template <typename T>
void matmul_forward(T* out, const T* inp, const T* w, const T* bias, std::size_t N, std::size_t in,
                    std::size_t outdim) {
  for (std::size_t n = 0; n < N; ++n) {
    T* o = out + n * outdim;
    for (std::size_t j = 0; j < outdim; ++j) o[j] = bias ? bias[j] : T(0);
    const T* x = inp + n * in;
    for (std::size_t i = 0; i < in; ++i) {
      const T xi = x[i];
      const T* wr = w + i * outdim;
      for (std::size_t j = 0; j < outdim; ++j) o[j] += xi * wr[j];
    }
  }
}

// Accumulates into dinp / dw / dbias; any of them may be null.
template <typename T>
void matmul_backward(T* dinp, T* dw, T* dbias, const T* dout, const T* inp, const T* w, std::size_t N,
                     std::size_t in, std::size_t outdim) {
  for (std::size_t n = 0; n < N; ++n) {
    const T* dy = dout + n * outdim;
    const T* x = inp + n * in;
    for (std::size_t i = 0; i < in; ++i) {
      const T* wr = w + i * outdim;
      if (dinp) {
        T acc = 0;
        for (std::size_t j = 0; j < outdim; ++j) acc += dy[j] * wr[j];
        dinp[n * in + i] += acc;
      }
      if (dw) {
        T* dwr = dw + i * outdim;
        const T xi = x[i];
        for (std::size_t j = 0; j < outdim; ++j) dwr[j] += xi * dy[j];
      }
    }
    if (dbias) {
      for (std::size_t j = 0; j < outdim; ++j) dbias[j] += dy[j];
    }
  }
}

template <typename T>
void attention_forward(T* out, T* att, const T* qkv, std::size_t B, std::size_t Tn, std::size_t C,
                       std::size_t NH) {
  const std::size_t hs = C / NH;
  const T scale = T(1) / std::sqrt(static_cast<T>(hs));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < Tn; ++t) {
      for (std::size_t h = 0; h < NH; ++h) {
        const T* q = qkv + (b * Tn + t) * 3 * C + h * hs;
        T* row = att + ((b * NH + h) * Tn + t) * Tn;
        T maxv = -std::numeric_limits<T>::infinity();
        for (std::size_t t2 = 0; t2 <= t; ++t2) {
          const T* k = qkv + (b * Tn + t2) * 3 * C + C + h * hs;
          T s = 0;
          for (std::size_t i = 0; i < hs; ++i) s += q[i] * k[i];
          s *= scale;
          row[t2] = s;
          if (s > maxv) maxv = s;
        }
        T sum = 0;
        for (std::size_t t2 = 0; t2 <= t; ++t2) {
          row[t2] = std::exp(row[t2] - maxv);
          sum += row[t2];
        }
        const T inv = T(1) / sum;
        for (std::size_t t2 = 0; t2 <= t; ++t2) row[t2] *= inv;
        for (std::size_t t2 = t + 1; t2 < Tn; ++t2) row[t2] = 0;

        T* y = out + (b * Tn + t) * C + h * hs;
        for (std::size_t i = 0; i < hs; ++i) y[i] = 0;
        for (std::size_t t2 = 0; t2 <= t; ++t2) {
          const T* v = qkv + (b * Tn + t2) * 3 * C + 2 * C + h * hs;
          const T a = row[t2];
          for (std::size_t i = 0; i < hs; ++i) y[i] += a * v[i];
        }
      }
    }
  }
}

template <typename T>
void attention_backward(T* dqkv, const T* dout, const T* qkv, const T* att, std::size_t B, std::size_t Tn,
                        std::size_t C, std::size_t NH) {
  const std::size_t hs = C / NH;
  const T scale = T(1) / std::sqrt(static_cast<T>(hs));
  std::vector<T> datt(Tn);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < Tn; ++t) {
      for (std::size_t h = 0; h < NH; ++h) {
        const T* row = att + ((b * NH + h) * Tn + t) * Tn;
        const T* dy = dout + (b * Tn + t) * C + h * hs;
        const T* q = qkv + (b * Tn + t) * 3 * C + h * hs;
        T* dq = dqkv + (b * Tn + t) * 3 * C + h * hs;
        T dot_sum = 0;
        for (std::size_t t2 = 0; t2 <= t; ++t2) {
          const T* v = qkv + (b * Tn + t2) * 3 * C + 2 * C + h * hs;
          T* dv = dqkv + (b * Tn + t2) * 3 * C + 2 * C + h * hs;
          T d = 0;
          for (std::size_t i = 0; i < hs; ++i) {
            d += dy[i] * v[i];
            dv[i] += row[t2] * dy[i];
          }
          datt[t2] = d;
          dot_sum += row[t2] * d;
        }
        for (std::size_t t2 = 0; t2 <= t; ++t2) {
          const T ds = row[t2] * (datt[t2] - dot_sum) * scale;
          const T* k = qkv + (b * Tn + t2) * 3 * C + C + h * hs;
          T* dk = dqkv + (b * Tn + t2) * 3 * C + C + h * hs;
          for (std::size_t i = 0; i < hs; ++i) {
            dq[i] += ds * k[i];
            dk[i] += ds * q[i];
          }
        }
      }
    }
  }
}

template <typename T>
void gelu_forward(T* out, const T* inp, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T x = inp[i];
    const T u = kGeluScale<T> * (x + T(0.044715) * x * x * x);
    out[i] = T(0.5) * x * (T(1) + std::tanh(u));
  }
}

template <typename T>
void gelu_backward(T* dinp, const T* inp, const T* dout, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T x = inp[i];
    const T u = kGeluScale<T> * (x + T(0.044715) * x * x * x);
    const T th = std::tanh(u);
    const T du = kGeluScale<T> * (T(1) + T(3) * T(0.044715) * x * x);
    const T grad = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
    dinp[i] += grad * dout[i];
  }
}

template <typename T>
void make_dropout_mask(std::vector<T>& mask, std::size_t n, double p, std::mt19937_64& rng) {
  mask.resize(n);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : mask) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m = u < p ? T(0) : keep_scale;
  }
}

}  // namespace detail

/// Runs the model on `tokens` laid out as (batch, time) and fills `cache` for backward.
template <typename T>
ForwardOutput<T> forward(const Model<T>& model, std::span<const TokenId> tokens, std::size_t batch,
                         std::size_t time, ForwardCache<T>& cache, const ForwardOptions& opts = {}) {
  using namespace detail;
  const auto& cfg = model.config;
  const auto& lay = model.layout;
  require(batch >= 1 && time >= 1, ErrorCode::ShapeMismatch, "empty batch");
  require(tokens.size() == batch * time, ErrorCode::ShapeMismatch, "token count != batch * time");
  require(time <= cfg.context_length, ErrorCode::ShapeMismatch,
          "sequence length " + std::to_string(time) + " exceeds context " + std::to_string(cfg.context_length));
  for (auto id : tokens) {
    require(id < cfg.vocab_size, ErrorCode::TokenOutOfRange, "token id " + std::to_string(id));
  }

  const std::size_t B = batch, Tn = time, C = cfg.d_model, NH = cfg.n_heads, V = cfg.vocab_size;
  const std::size_t N = B * Tn;
  const bool dropout = opts.training && cfg.dropout > 0.0;
  std::mt19937_64 rng(opts.dropout_seed);

  cache.batch = B;
  cache.time = Tn;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.layers.resize(cfg.n_layers);

  std::vector<T> x(N * C);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < Tn; ++t) {
      const T* te = model.at(lay.wte) + tokens[b * Tn + t] * C;
      const T* pe = model.at(lay.wpe) + t * C;
      T* o = x.data() + (b * Tn + t) * C;
      for (std::size_t i = 0; i < C; ++i) o[i] = te[i] + pe[i];
    }
  }

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& p = lay.layers[l];
    auto& a = cache.layers[l];
    a.x_in = x;
    a.ln1.resize(N * C);
    a.ln1_mean.resize(N);
    a.ln1_rstd.resize(N);
    a.qkv.resize(N * 3 * C);
    a.att.resize(B * NH * Tn * Tn);
    a.atty.resize(N * C);
    a.ln2.resize(N * C);
    a.ln2_mean.resize(N);
    a.ln2_rstd.resize(N);
    a.fc.resize(N * 4 * C);
    a.gelu.resize(N * 4 * C);

    layernorm_forward(a.ln1.data(), a.ln1_mean.data(), a.ln1_rstd.data(), x.data(), model.at(p.ln1_w),
                      model.at(p.ln1_b), N, C);
    matmul_forward(a.qkv.data(), a.ln1.data(), model.at(p.qkv_w), model.at(p.qkv_b), N, C, 3 * C);
    attention_forward(a.atty.data(), a.att.data(), a.qkv.data(), B, Tn, C, NH);
    std::vector<T> proj(N * C);
    matmul_forward(proj.data(), a.atty.data(), model.at(p.proj_w), model.at(p.proj_b), N, C, C);
    if (dropout) {
      make_dropout_mask(a.mask1, N * C, cfg.dropout, rng);
      for (std::size_t i = 0; i < N * C; ++i) proj[i] *= a.mask1[i];
    } else {
      a.mask1.clear();
    }
    for (std::size_t i = 0; i < N * C; ++i) x[i] += proj[i];
    a.x_mid = x;

    layernorm_forward(a.ln2.data(), a.ln2_mean.data(), a.ln2_rstd.data(), x.data(), model.at(p.ln2_w),
                      model.at(p.ln2_b), N, C);
    matmul_forward(a.fc.data(), a.ln2.data(), model.at(p.fc_w), model.at(p.fc_b), N, C, 4 * C);
    gelu_forward(a.gelu.data(), a.fc.data(), N * 4 * C);
    std::vector<T> mlp(N * C);
    matmul_forward(mlp.data(), a.gelu.data(), model.at(p.fcproj_w), model.at(p.fcproj_b), N, 4 * C, C);
    if (dropout) {
      make_dropout_mask(a.mask2, N * C, cfg.dropout, rng);
      for (std::size_t i = 0; i < N * C; ++i) mlp[i] *= a.mask2[i];
    } else {
      a.mask2.clear();
    }
    for (std::size_t i = 0; i < N * C; ++i) x[i] += mlp[i];
  }

  cache.x_final = x;
  cache.lnf_mean.resize(N);
  cache.lnf_rstd.resize(N);
  ForwardOutput<T> out;
  out.batch = B;
  out.time = Tn;
  out.vocab = V;
  out.d_model = C;
  out.hidden.resize(N * C);
  layernorm_forward(out.hidden.data(), cache.lnf_mean.data(), cache.lnf_rstd.data(), x.data(),
                    model.at(lay.lnf_w), model.at(lay.lnf_b), N, C);

  out.logprobs.resize(N * V);
  cache.probs.resize(N * V);
  const T* head = model.at(lay.lm_head);
  for (std::size_t n = 0; n < N; ++n) {
    const T* h = out.hidden.data() + n * C;
    T* lp = out.logprobs.data() + n * V;
    T maxv = -std::numeric_limits<T>::infinity();
    for (std::size_t v = 0; v < V; ++v) {
      const T* wr = head + v * C;
      T s = 0;
      for (std::size_t i = 0; i < C; ++i) s += h[i] * wr[i];
      lp[v] = s;
      if (s > maxv) maxv = s;
    }
    T sum = 0;
    for (std::size_t v = 0; v < V; ++v) sum += std::exp(lp[v] - maxv);
    const T lse = maxv + std::log(sum);
    T* pr = cache.probs.data() + n * V;
    for (std::size_t v = 0; v < V; ++v) {
      lp[v] -= lse;
      pr[v] = std::exp(lp[v]);
    }
  }
  return out;
}

template <typename T>
ForwardOutput<T> forward(const Model<T>& model, std::span<const TokenId> tokens, std::size_t batch,
                         std::size_t time) {
  ForwardCache<T> cache;
  return forward(model, tokens, batch, time, cache);
}

/// Exact gradient of a scalar objective w.r.t. every parameter, given its gradient
/// w.r.t. the forward outputs: `dlogprobs` (batch, time, vocab) and, optionally,
/// `dhidden` (batch, time, d_model). Returns a buffer in the model's ParamLayout.
template <typename T>
std::vector<T> backward(const Model<T>& model, const ForwardCache<T>& cache, std::span<const T> dlogprobs,
                        std::span<const T> dhidden = {}) {
  using namespace detail;
  const auto& cfg = model.config;
  const auto& lay = model.layout;
  const std::size_t B = cache.batch, Tn = cache.time, C = cfg.d_model, NH = cfg.n_heads, V = cfg.vocab_size;
  const std::size_t N = B * Tn;
  require(dlogprobs.size() == N * V, ErrorCode::ShapeMismatch, "dlogprobs shape");
  require(dhidden.empty() || dhidden.size() == N * C, ErrorCode::ShapeMismatch, "dhidden shape");

  std::vector<T> grads(lay.total, T(0));
  auto g = [&](std::size_t off) { return grads.data() + off; };

  // Recompute the final hidden state from the cached pre-norm residual stream.
  std::vector<T> hf(N * C);
  for (std::size_t n = 0; n < N; ++n) {
    const T* x = cache.x_final.data() + n * C;
    for (std::size_t i = 0; i < C; ++i) {
      hf[n * C + i] = (x[i] - cache.lnf_mean[n]) * cache.lnf_rstd[n] * model.at(lay.lnf_w)[i] +
                      model.at(lay.lnf_b)[i];
    }
  }

  // log_softmax backward: dlogit_v = g_v - p_v * sum_u g_u
  std::vector<T> dhf(N * C, T(0));
  if (!dhidden.empty()) std::copy(dhidden.begin(), dhidden.end(), dhf.begin());
  const T* head = model.at(lay.lm_head);
  T* dhead = g(lay.lm_head);
  std::vector<T> dlogits(V);
  for (std::size_t n = 0; n < N; ++n) {
    const T* gl = dlogprobs.data() + n * V;
    const T* pr = cache.probs.data() + n * V;
    T gsum = 0;
    for (std::size_t v = 0; v < V; ++v) gsum += gl[v];
    bool any = false;
    for (std::size_t v = 0; v < V; ++v) {
      dlogits[v] = gl[v] - pr[v] * gsum;
      any = any || dlogits[v] != T(0);
    }
    if (!any) continue;
    const T* h = hf.data() + n * C;
    T* dh = dhf.data() + n * C;
    for (std::size_t v = 0; v < V; ++v) {
      const T d = dlogits[v];
      const T* wr = head + v * C;
      T* dwr = dhead + v * C;
      for (std::size_t i = 0; i < C; ++i) {
        dh[i] += d * wr[i];
        dwr[i] += d * h[i];
      }
    }
  }

  std::vector<T> dx(N * C, T(0));
  layernorm_backward(dx.data(), g(lay.lnf_w), g(lay.lnf_b), dhf.data(), cache.x_final.data(),
                     model.at(lay.lnf_w), cache.lnf_mean.data(), cache.lnf_rstd.data(), N, C);

  std::vector<T> dbranch(N * C), dgelu(N * 4 * C), dfc(N * 4 * C), dln(N * C), datty(N * C), dqkv(N * 3 * C);
  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const auto& p = lay.layers[li];
    const auto& a = cache.layers[li];

    // x_out = x_mid + mask2 * mlp(ln2(x_mid))
    for (std::size_t i = 0; i < N * C; ++i) dbranch[i] = a.mask2.empty() ? dx[i] : dx[i] * a.mask2[i];
    std::fill(dgelu.begin(), dgelu.end(), T(0));
    matmul_backward(dgelu.data(), g(p.fcproj_w), g(p.fcproj_b), dbranch.data(), a.gelu.data(),
                    model.at(p.fcproj_w), N, 4 * C, C);
    std::fill(dfc.begin(), dfc.end(), T(0));
    gelu_backward(dfc.data(), a.fc.data(), dgelu.data(), N * 4 * C);
    std::fill(dln.begin(), dln.end(), T(0));
    matmul_backward(dln.data(), g(p.fc_w), g(p.fc_b), dfc.data(), a.ln2.data(), model.at(p.fc_w), N, C, 4 * C);
    layernorm_backward(dx.data(), g(p.ln2_w), g(p.ln2_b), dln.data(), a.x_mid.data(), model.at(p.ln2_w),
                       a.ln2_mean.data(), a.ln2_rstd.data(), N, C);

    // x_mid = x_in + mask1 * proj(attn(ln1(x_in)))
    for (std::size_t i = 0; i < N * C; ++i) dbranch[i] = a.mask1.empty() ? dx[i] : dx[i] * a.mask1[i];
    std::fill(datty.begin(), datty.end(), T(0));
    matmul_backward(datty.data(), g(p.proj_w), g(p.proj_b), dbranch.data(), a.atty.data(), model.at(p.proj_w),
                    N, C, C);
    std::fill(dqkv.begin(), dqkv.end(), T(0));
    attention_backward(dqkv.data(), datty.data(), a.qkv.data(), a.att.data(), B, Tn, C, NH);
    std::fill(dln.begin(), dln.end(), T(0));
    matmul_backward(dln.data(), g(p.qkv_w), g(p.qkv_b), dqkv.data(), a.ln1.data(), model.at(p.qkv_w), N, C,
                    3 * C);
    layernorm_backward(dx.data(), g(p.ln1_w), g(p.ln1_b), dln.data(), a.x_in.data(), model.at(p.ln1_w),
                       a.ln1_mean.data(), a.ln1_rstd.data(), N, C);
  }

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < Tn; ++t) {
      const T* d = dx.data() + (b * Tn + t) * C;
      T* dte = g(lay.wte) + cache.tokens[b * Tn + t] * C;
      T* dpe = g(lay.wpe) + t * C;
      for (std::size_t i = 0; i < C; ++i) {
        dte[i] += d[i];
        dpe[i] += d[i];
      }
    }
  }
  return grads;
}

/// Rows of `row_length` tokens; each row contributes row_length - 1 next-token targets.
struct RowView {
  std::span<const TokenId> tokens;
  std::size_t rows = 0;
  std::size_t row_length = 0;
};

inline RowView rows_of(const TokenBatch& batch) { return {batch.tokens, batch.rows(), batch.length}; }

namespace detail {

struct SplitRows {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  std::size_t time = 0;
};

inline SplitRows split_rows(const RowView& rows) {
  require(rows.row_length >= 2, ErrorCode::ShapeMismatch, "rows need at least 2 tokens");
  require(rows.rows >= 1, ErrorCode::ShapeMismatch, "no rows");
  require(rows.tokens.size() == rows.rows * rows.row_length, ErrorCode::ShapeMismatch, "row token count");
  SplitRows s;
  s.time = rows.row_length - 1;
  for (std::size_t r = 0; r < rows.rows; ++r) {
    auto row = rows.tokens.subspan(r * rows.row_length, rows.row_length);
    s.inputs.insert(s.inputs.end(), row.begin(), row.end() - 1);
    s.targets.insert(s.targets.end(), row.begin() + 1, row.end());
  }
  return s;
}

}  // namespace detail

/// Mean next-token negative log-likelihood over every position of every row.
template <typename T>
T nll(const Model<T>& model, const RowView& rows) {
  auto s = detail::split_rows(rows);
  auto out = forward(model, s.inputs, rows.rows, s.time);
  T total = 0;
  for (std::size_t n = 0; n < s.targets.size(); ++n) total -= out.logprobs[n * out.vocab + s.targets[n]];
  return total / static_cast<T>(s.targets.size());
}

template <typename T>
struct LossAndGrads {
  T loss = 0;
  std::vector<T> grads;
};

template <typename T>
LossAndGrads<T> loss_and_grads(const Model<T>& model, const RowView& rows, const ForwardOptions& opts = {}) {
  auto s = detail::split_rows(rows);
  ForwardCache<T> cache;
  auto out = forward(model, s.inputs, rows.rows, s.time, cache, opts);
  const std::size_t N = s.targets.size();
  const T inv = T(1) / static_cast<T>(N);
  std::vector<T> dlogprobs(N * out.vocab, T(0));
  T total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    total -= out.logprobs[n * out.vocab + s.targets[n]];
    dlogprobs[n * out.vocab + s.targets[n]] = -inv;
  }
  return {total * inv, backward(model, cache, std::span<const T>(dlogprobs))};
}

}  // namespace timoe
