#include "timoe/lm.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"

namespace timoe {
namespace {

using testing::check_gradient;
using testing::random_tokens;

ExpertConfig micro() { return ExpertConfig::micro(); }

TEST(Init, DeterministicInSeed) {
  auto a = init_model<float>(micro());
  auto b = init_model<float>(micro());
  EXPECT_EQ(a.params, b.params);
  auto cfg = micro();
  cfg.seed = 1;
  EXPECT_NE(init_model<float>(cfg).params, a.params);
}

TEST(Init, RejectsIndivisibleHeads) {
  auto cfg = micro();
  cfg.n_heads = 3;
  try {
    init_model<float>(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
  }
}

TEST(Init, MicroParameterCountMatchesHandCount) {
  // V=260, C=16, L=32, 2 layers, tied head:
  //   wte 260*16 = 4160, wpe 32*16 = 512
  //   per layer: ln_1 32 + c_attn 16*48+48 = 816 + attn c_proj 16*16+16 = 272
  //              + ln_2 32 + c_fc 16*64+64 = 1088 + mlp c_proj 64*16+16 = 1040  -> 3280
  //   ln_f 32
  //   total 4160 + 512 + 2*3280 + 32 = 11264
  EXPECT_EQ(init_model<float>(micro()).num_params(), 11264u);
  auto untied = micro();
  untied.tie_weights = false;
  EXPECT_EQ(init_model<float>(untied).num_params(), 11264u + 4160u);
}

TEST(Init, ResidualProjectionsUseScaledStd) {
  auto cfg = micro();
  cfg.d_model = 64;
  cfg.n_heads = 4;
  auto m = init_model<double>(cfg);
  auto sample_std = [&](const std::string& name) {
    for (const auto& s : m.layout.tensors) {
      if (s.name != name) continue;
      double sq = 0;
      for (std::size_t i = 0; i < s.size; ++i) sq += m.params[s.offset + i] * m.params[s.offset + i];
      return std::sqrt(sq / static_cast<double>(s.size));
    }
    return -1.0;
  };
  EXPECT_NEAR(sample_std("h.0.mlp.c_fc.weight"), 0.02, 0.002);
  EXPECT_NEAR(sample_std("h.0.mlp.c_proj.weight"), 0.02 / std::sqrt(4.0), 0.001);
}

TEST(Forward, RowsAreNormalized) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto cfg = micro();
    cfg.seed = static_cast<std::uint64_t>(trial);
    auto m = init_model<float>(cfg);
    testing::randomize(m.params, rng, 0.5);
    auto tokens = random_tokens(rng, 3 * 20, cfg.vocab_size);
    auto out = forward(m, tokens, 3, 20);
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t t = 0; t < 20; ++t) {
        double mass = 0;
        for (auto lp : out.logprobs_at(b, t)) mass += std::exp(static_cast<double>(lp));
        ASSERT_NEAR(mass, 1.0, 1e-5);
      }
    }
  }
}

TEST(Forward, ZeroOutputProjectionGivesUniform) {
  auto cfg = micro();
  cfg.tie_weights = false;
  auto m = init_model<double>(cfg);
  std::fill(m.at(m.layout.lm_head), m.at(m.layout.lm_head) + cfg.vocab_size * cfg.d_model, 0.0);
  std::mt19937_64 rng(2);
  auto tokens = random_tokens(rng, 10, cfg.vocab_size);
  auto out = forward(m, tokens, 1, 10);
  for (auto lp : out.logprobs) ASSERT_NEAR(lp, -std::log(260.0), 1e-12);
  std::vector<TokenId> row(tokens);
  row.push_back(5);
  EXPECT_NEAR(nll(m, {row, 1, row.size()}), std::log(260.0), 1e-12);
}

TEST(Forward, CausalPrefixIsBitIdentical) {
  auto m = init_model<float>(micro());
  std::mt19937_64 rng(5);
  testing::randomize(m.params, rng, 0.3);
  auto tokens = random_tokens(rng, 24, 260);
  auto base = forward(m, tokens, 1, 24);
  for (std::size_t pos : {1u, 7u, 23u}) {
    auto edited = tokens;
    edited[pos] = (edited[pos] + 1) % 260;
    auto out = forward(m, edited, 1, 24);
    for (std::size_t t = 0; t < pos; ++t) {
      auto a = base.logprobs_at(0, t), b = out.logprobs_at(0, t);
      ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << "position " << t;
      auto ha = base.hidden_at(0, t), hb = out.hidden_at(0, t);
      ASSERT_TRUE(std::equal(ha.begin(), ha.end(), hb.begin()));
    }
  }
  // a shorter input reproduces the prefix of a longer one
  auto prefix = forward(m, std::span<const TokenId>(tokens).first(10), 1, 10);
  for (std::size_t t = 0; t < 10; ++t) {
    auto a = base.logprobs_at(0, t), b = prefix.logprobs_at(0, t);
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST(Forward, RejectsBadInputs) {
  auto m = init_model<float>(micro());
  std::vector<TokenId> bad{1, 2, 300};
  try {
    forward(m, bad, 1, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TokenOutOfRange);
  }
  std::vector<TokenId> too_long(33, 1);
  try {
    forward(m, too_long, 1, 33);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
  EXPECT_THROW(forward(m, too_long, 2, 16), Error);
}

TEST(Backward, MatchesFiniteDifferencesInDouble) {
  for (bool tied : {true, false}) {
    auto cfg = micro();
    cfg.tie_weights = tied;
    auto m = init_model<double>(cfg);
    std::mt19937_64 rng(42);
    testing::randomize(m.params, rng, 0.2);
    auto tokens = random_tokens(rng, 2 * 9, cfg.vocab_size);
    RowView rows{tokens, 2, 9};
    auto analytic = loss_and_grads(m, rows);
    auto r = check_gradient(m.params, analytic.grads, [&] { return nll(m, rows); });
    EXPECT_EQ(r.checked, m.num_params());
    EXPECT_LT(r.max_rel_error, 1e-4) << "tied=" << tied << " worst index " << r.worst_index;
  }
}

TEST(Backward, HiddenGradientPathMatchesFiniteDifferences) {
  // objective = sum_t <c_t, hidden_t> + sum logprobs weighted by random coefficients
  auto m = init_model<double>(micro());
  std::mt19937_64 rng(8);
  testing::randomize(m.params, rng, 0.2);
  auto tokens = random_tokens(rng, 6, 260);
  std::vector<double> dlp(6 * 260), dh(6 * 16);
  testing::randomize(dlp, rng, 1.0);
  testing::randomize(dh, rng, 1.0);
  auto objective = [&] {
    auto out = forward(m, tokens, 1, 6);
    double s = 0;
    for (std::size_t i = 0; i < dlp.size(); ++i) s += dlp[i] * out.logprobs[i];
    for (std::size_t i = 0; i < dh.size(); ++i) s += dh[i] * out.hidden[i];
    return s;
  };
  ForwardCache<double> cache;
  forward(m, tokens, 1, 6, cache);
  auto grads = backward(m, cache, std::span<const double>(dlp), std::span<const double>(dh));
  auto r = check_gradient(m.params, grads, objective);
  EXPECT_LT(r.max_rel_error, 1e-4) << "worst index " << r.worst_index;
}

TEST(Backward, DropoutMasksAreReusedInBackward) {
  auto cfg = micro();
  cfg.dropout = 0.3;
  auto m = init_model<double>(cfg);
  std::mt19937_64 rng(4);
  testing::randomize(m.params, rng, 0.2);
  auto tokens = random_tokens(rng, 8, 260);
  RowView rows{tokens, 1, 8};
  ForwardOptions opts{true, 99};
  auto analytic = loss_and_grads(m, rows, opts);
  auto loss = [&] {
    auto s = detail::split_rows(rows);
    ForwardCache<double> c;
    auto out = forward(m, s.inputs, 1, s.time, c, opts);
    double total = 0;
    for (std::size_t n = 0; n < s.targets.size(); ++n) total -= out.logprobs[n * 260 + s.targets[n]];
    return total / static_cast<double>(s.targets.size());
  };
  auto r = check_gradient(m.params, analytic.grads, loss);
  EXPECT_LT(r.max_rel_error, 1e-4);
  // evaluation mode ignores dropout
  EXPECT_EQ(nll(m, rows), loss_and_grads(m, rows).loss);
}

TEST(Loss, UniformModelHasLogVocabLoss) {
  auto m = init_model<double>(micro());
  std::fill(m.params.begin(), m.params.begin() + static_cast<std::ptrdiff_t>(260 * 16), 0.0);
  std::vector<TokenId> row{1, 2, 3, 4, 5};
  EXPECT_NEAR(loss_and_grads(m, {row, 1, 5}).loss, std::log(260.0), 1e-12);
}

}  // namespace
}  // namespace timoe
