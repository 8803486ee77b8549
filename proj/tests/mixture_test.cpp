#include "timoe/mixture.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"

namespace timoe {
namespace {

using testing::random_registry;
using testing::random_tokens;

// Probability-domain oracle: log(sum_k w_k * p_k), no shifting.
std::vector<double> brute_force_mix(const std::vector<std::vector<double>>& lps, const std::vector<double>& w,
                                    std::size_t V) {
  std::vector<double> out(V);
  for (std::size_t v = 0; v < V; ++v) {
    double p = 0;
    for (std::size_t k = 0; k < lps.size(); ++k) p += w[k] * std::exp(lps[k][v]);
    out[v] = std::log(p);
  }
  return out;
}

std::vector<double> random_log_distribution(std::mt19937_64& rng, std::size_t V) {
  std::gamma_distribution<double> g(0.5, 1.0);
  std::vector<double> p(V);
  double s = 0;
  for (auto& x : p) s += (x = g(rng) + 1e-12);
  for (auto& x : p) x = std::log(x / s);
  return p;
}

std::vector<std::span<const double>> spans(const std::vector<std::vector<double>>& v) {
  return {v.begin(), v.end()};
}

TEST(Mix, HandComputedTwoExpertExample) {
  std::vector<std::vector<double>> lps{{std::log(0.8), std::log(0.2)}, {std::log(0.4), std::log(0.6)}};
  std::vector<double> w{0.5, 0.5};
  auto out = mix<double>(spans(lps), w, 1, 2);
  EXPECT_NEAR(out[0], std::log(0.6), 1e-10);
  EXPECT_NEAR(out[1], std::log(0.4), 1e-10);
}

TEST(Mix, AgreesWithProbabilityDomainOracle) {
  std::mt19937_64 rng(123);
  std::uniform_int_distribution<std::size_t> nk(1, 6), nv(2, 40);
  for (int trial = 0; trial < 100; ++trial) {
    const auto K = nk(rng), V = nv(rng);
    std::vector<std::vector<double>> lps;
    for (std::size_t k = 0; k < K; ++k) lps.push_back(random_log_distribution(rng, V));
    auto w = random_log_distribution(rng, K);
    for (auto& x : w) x = std::exp(x);
    auto out = mix<double>(spans(lps), w, 1, V);
    auto oracle = brute_force_mix(lps, w, V);
    for (std::size_t v = 0; v < V; ++v) ASSERT_NEAR(out[v], oracle[v], 1e-10);
  }
}

TEST(Mix, SingleExpertIsIdentity) {
  std::mt19937_64 rng(4);
  std::vector<std::vector<float>> lps{{}};
  for (int i = 0; i < 50; ++i) lps[0].push_back(static_cast<float>(-std::abs(std::normal_distribution<>(0, 5)(rng))));
  std::vector<float> w{1.0f};
  std::vector<std::span<const float>> s{lps[0]};
  auto out = mix<float>(s, w, 1, 50);
  for (std::size_t v = 0; v < 50; ++v) EXPECT_NEAR(out[v], lps[0][v], 1e-7);
}

TEST(Mix, ExtremeLogScoresStayFinite) {
  std::vector<std::vector<double>> lps{{-1e4, -1e4}, {-1e4, -1e4}, {-1e4, -1e4}};
  std::vector<double> w{1.0 / 3, 1.0 / 3, 1.0 / 3};
  auto out = mix<double>(spans(lps), w, 1, 2);
  EXPECT_EQ(out[0], -1e4);
  EXPECT_EQ(out[1], -1e4);

  std::vector<std::vector<double>> lop{{-1e4, 0.0}, {0.0, -1e4}};
  auto out2 = mix<double>(spans(lop), std::vector<double>{0.5, 0.5}, 1, 2);
  for (auto v : out2) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, std::log(0.5), 1e-12);
  }
}

TEST(Mix, ShiftInvariance) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> lps(3, std::vector<double>(7));
    for (auto& l : lps) {
      for (auto& x : l) x = n(rng);  // unnormalised scores
    }
    std::vector<double> w{0.2, 0.5, 0.3};
    const double c = n(rng) * 100;
    auto shifted = lps;
    for (auto& l : shifted) {
      for (auto& x : l) x += c;
    }
    auto a = mix<double>(spans(lps), w, 1, 7), b = mix<double>(spans(shifted), w, 1, 7);
    for (std::size_t v = 0; v < 7; ++v) ASSERT_NEAR(b[v] - a[v], c, 1e-9);
  }
}

TEST(Mix, OutputLiesBetweenExpertScores) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<double>> lps;
    for (int k = 0; k < 4; ++k) lps.push_back(random_log_distribution(rng, 12));
    auto w = random_log_distribution(rng, 4);
    for (auto& x : w) x = std::exp(x);
    auto out = mix<double>(spans(lps), w, 1, 12);
    for (std::size_t v = 0; v < 12; ++v) {
      double lo = 1e300, hi = -1e300;
      for (auto& l : lps) {
        lo = std::min(lo, l[v]);
        hi = std::max(hi, l[v]);
      }
      ASSERT_LE(out[v], hi + 1e-12);
      ASSERT_GE(out[v], lo - 1e-12);
    }
  }
}

TEST(Mix, ErrorCases) {
  std::vector<std::vector<double>> lps{{0.0, 0.0}, {0.0, 0.0}};
  try {
    mix<double>(spans(lps), std::vector<double>{0.0, 0.0}, 1, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateWeights);
  }
  std::vector<std::vector<double>> ragged{{0.0, 0.0}, {0.0}};
  try {
    mix<double>(spans(ragged), std::vector<double>{0.5, 0.5}, 1, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
  // an unevaluated expert with zero weight is fine
  std::vector<std::vector<double>> partial{{std::log(0.5), std::log(0.5)}, {}};
  EXPECT_NO_THROW(mix<double>(spans(partial), std::vector<double>{1.0, 0.0}, 1, 2));
}

TEST(ComputeWeights, AvgIsUniformOverEligible) {
  auto mask = eligible_set(default_windows(), 2019);
  Strategy<double> s{StrategyKind::avg, std::nullopt};
  auto w = compute_weights<double>(s, mask, {}, 3);
  for (std::size_t p = 0; p < 3; ++p) {
    EXPECT_EQ(std::vector<double>(w.begin() + static_cast<std::ptrdiff_t>(p * 6),
                                  w.begin() + static_cast<std::ptrdiff_t>(p * 6 + 6)),
              (std::vector<double>{0.25, 0.25, 0.25, 0.25, 0, 0}));
  }
}

TEST(ComputeWeights, ZeroRouterIsUniformAndMaskIsExact) {
  Strategy<double> s{StrategyKind::learned_avg, make_router<double>({16, 6, 0, RouterInput::latest_eligible})};
  std::vector<double> hidden(2 * 16, 0.7);
  auto all = compute_weights<double>(s, eligible_set(default_windows(), 2024), hidden, 2);
  for (auto w : all) EXPECT_DOUBLE_EQ(w, 1.0 / 6.0);

  std::mt19937_64 rng(1);
  testing::randomize(s.router->params, rng, 5.0);
  auto one = compute_weights<double>(s, eligible_set(default_windows(), 2013), hidden, 2);
  for (std::size_t p = 0; p < 2; ++p) {
    EXPECT_EQ(one[p * 6], 1.0);
    for (std::size_t k = 1; k < 6; ++k) EXPECT_EQ(one[p * 6 + k], 0.0);
  }
  auto some = compute_weights<double>(s, eligible_set(default_windows(), 2017), hidden, 2);
  for (std::size_t p = 0; p < 2; ++p) {
    double sum = 0;
    for (std::size_t k = 0; k < 6; ++k) sum += some[p * 6 + k];
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_EQ(some[p * 6 + 3], 0.0);
    EXPECT_EQ(some[p * 6 + 5], 0.0);
  }
}

TEST(ComputeWeights, RouterStrategiesNeedHidden) {
  Strategy<double> s{StrategyKind::coadapt, make_router<double>({16, 6, 0, RouterInput::latest_eligible})};
  try {
    compute_weights<double>(s, eligible_set(default_windows(), 2020), {}, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingHidden);
  }
}

class PredictTest : public ::testing::Test {
 protected:
  ExpertRegistry<float> reg = random_registry<float>(default_windows(), ExpertConfig::micro(), 100);
  std::vector<TokenId> tokens = [] {
    std::mt19937_64 rng(5);
    return random_tokens(rng, 2 * 12, 260);
  }();
};

TEST_F(PredictTest, YearStrategyReturnsContainingExpert) {
  Strategy<float> s{StrategyKind::year, std::nullopt};
  auto out = predict(reg, s, tokens, 2, 12, 2022);
  auto direct = forward(reg.expert(4), tokens, 2, 12);
  EXPECT_EQ(out.logprobs, direct.logprobs);
  for (std::size_t p = 0; p < 24; ++p) {
    for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(out.weights[p * 6 + k], k == 4 ? 1.0f : 0.0f);
  }
}

TEST_F(PredictTest, AvgWithOneEligibleMatchesThatExpert) {
  Strategy<float> s{StrategyKind::avg, std::nullopt};
  auto out = predict(reg, s, tokens, 2, 12, 2013);
  auto direct = forward(reg.expert(0), tokens, 2, 12);
  for (std::size_t i = 0; i < out.logprobs.size(); ++i) ASSERT_NEAR(out.logprobs[i], direct.logprobs[i], 1e-7);
}

TEST_F(PredictTest, IneligibleExpertsDoNotAffectOutput) {
  auto router = make_router<float>({16, 6, 0, RouterInput::latest_eligible});
  std::mt19937_64 rng(77);
  testing::randomize(router.params, rng, 1.0);
  for (auto s : {Strategy<float>{StrategyKind::avg, std::nullopt},
                 Strategy<float>{StrategyKind::learned_avg, router}, Strategy<float>{StrategyKind::coadapt, router}}) {
    auto base = predict(reg, s, tokens, 2, 12, 2015);
    auto perturbed = reg;
    for (std::size_t k = 2; k < 6; ++k) {
      auto m = reg.expert(k);
      testing::randomize(m.params, rng, 1.0);
      perturbed = perturbed.with_model(k, std::move(m));
    }
    auto again = predict(perturbed, s, tokens, 2, 12, 2015);
    EXPECT_EQ(base.logprobs, again.logprobs);
    EXPECT_EQ(base.weights, again.weights);
  }
}

TEST_F(PredictTest, OutputIsNormalizedAndThreadIndependent) {
  auto router = make_router<float>({16, 6, 0, RouterInput::mean_eligible});
  std::mt19937_64 rng(3);
  testing::randomize(router.params, rng, 1.0);
  Strategy<float> s{StrategyKind::learned_avg, router};
  auto one = predict(reg, s, tokens, 2, 12, 2020, 1);
  auto four = predict(reg, s, tokens, 2, 12, 2020, 4);
  EXPECT_EQ(one.logprobs, four.logprobs);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 0; t < 12; ++t) {
      double mass = 0, wsum = 0;
      for (auto lp : one.logprobs_at(b, t)) mass += std::exp(static_cast<double>(lp));
      for (auto w : one.weights_at(b, t)) wsum += w;
      EXPECT_NEAR(mass, 1.0, 1e-5);
      EXPECT_NEAR(wsum, 1.0, 1e-6);
    }
  }
}

TEST_F(PredictTest, MissingYearMeansLatest) {
  Strategy<float> s{StrategyKind::avg, std::nullopt};
  EXPECT_EQ(predict(reg, s, tokens, 2, 12, std::nullopt).logprobs, predict(reg, s, tokens, 2, 12, 2024).logprobs);
  EXPECT_THROW(predict(reg, s, tokens, 2, 12, 2010), Error);
}

TEST_F(PredictTest, StrategyRouterMismatchIsRejected) {
  Strategy<float> no_router{StrategyKind::learned_avg, std::nullopt};
  EXPECT_THROW(predict(reg, no_router, tokens, 2, 12, 2020), Error);
  Strategy<float> wrong_size{StrategyKind::learned_avg, make_router<float>({16, 3, 0, RouterInput::latest_eligible})};
  EXPECT_THROW(predict(reg, wrong_size, tokens, 2, 12, 2020), Error);
}

struct GradCase {
  std::size_t hidden;
  RouterInput input;
};

class MixtureGradTest : public ::testing::TestWithParam<GradCase> {};

TEST_P(MixtureGradTest, RouterAndExpertGradientsMatchFiniteDifferences) {
  const auto param = GetParam();
  auto windows = make_registry_windows(2013, 2018, 2);
  auto reg = random_registry<double>(windows, ExpertConfig::micro(), 7, 0.2);
  auto router = make_router<double>({16, 3, param.hidden, param.input}, 5);
  std::mt19937_64 rng(21);
  testing::randomize(router.params, rng, 0.5);
  Strategy<double> s{StrategyKind::coadapt, router};
  auto tokens = random_tokens(rng, 2 * 7, 260);
  RowView rows{tokens, 2, 7};
  const int year = 2016;  // experts 0 and 1 eligible, expert 2 masked

  auto res = mixture_loss_and_grads(reg, s, rows, year, {true, true, false});
  ASSERT_TRUE(res.expert_grads[2].empty());

  auto loss_with = [&](const ExpertRegistry<double>& r, const Strategy<double>& st) {
    return mixture_loss_and_grads(r, st, rows, year).loss;
  };
  // router
  auto rc = testing::check_gradient(s.router->params, res.router_grads, [&] { return loss_with(reg, s); });
  EXPECT_LT(rc.max_rel_error, 1e-4) << "router index " << rc.worst_index;
  // each eligible expert, including the hidden-state path into the router
  for (std::size_t k : {0u, 1u}) {
    auto params = reg.expert(k).params;
    auto loss = [&] {
      auto m = reg.expert(k);
      m.params = params;
      return loss_with(reg.with_model(k, std::move(m)), s);
    };
    // the router's curvature makes h = 1e-3 truncation visible here, so step smaller
    auto ec = testing::check_gradient(params, res.expert_grads[k], loss, 1e-4);
    EXPECT_LT(ec.max_rel_error, 1e-4) << "expert " << k << " index " << ec.worst_index;
  }
}

INSTANTIATE_TEST_SUITE_P(RouterVariants, MixtureGradTest,
                         ::testing::Values(GradCase{0, RouterInput::latest_eligible},
                                           GradCase{0, RouterInput::mean_eligible},
                                           GradCase{4, RouterInput::latest_eligible}));

TEST(MixtureLoss, ZeroRouterEqualsAverageLoss) {
  auto reg = random_registry<double>(default_windows(), ExpertConfig::micro(), 3);
  std::mt19937_64 rng(8);
  auto tokens = random_tokens(rng, 3 * 10, 260);
  RowView rows{tokens, 3, 10};
  Strategy<double> avg{StrategyKind::avg, std::nullopt};
  Strategy<double> learned{StrategyKind::learned_avg, make_router<double>({16, 6, 0, RouterInput::latest_eligible})};
  for (int year : {2013, 2018, 2024}) {
    const double a = mixture_loss_and_grads(reg, avg, rows, year).loss;
    const double l = mixture_loss_and_grads(reg, learned, rows, year).loss;
    EXPECT_NEAR(a, l, 1e-6);
    // and both equal the NLL read off predict's mixed distribution
    auto split = detail::split_rows(rows);
    auto out = predict(reg, avg, split.inputs, 3, 9, year);
    double nll = 0;
    for (std::size_t p = 0; p < split.targets.size(); ++p) nll -= out.logprobs[p * 260 + split.targets[p]];
    EXPECT_NEAR(a, nll / static_cast<double>(split.targets.size()), 1e-12);
  }
}

TEST(RouterCheckpoint, RoundTrip) {
  auto dir = testing::temp_dir("router_ckpt");
  auto r = make_router<float>({16, 6, 4, RouterInput::mean_eligible}, 3);
  std::mt19937_64 rng(2);
  testing::randomize(r.params, rng, 1.0);
  save_router(r, StrategyKind::coadapt, sha256("registry"), dir / "router.ckpt");
  auto back = load_router<float>(dir / "router.ckpt");
  EXPECT_EQ(back.router.params, r.params);
  EXPECT_EQ(back.kind, StrategyKind::coadapt);
  EXPECT_EQ(back.router.config.hidden, 4u);
  EXPECT_EQ(back.router.config.input, RouterInput::mean_eligible);
  EXPECT_EQ(back.registry_identity, sha256("registry"));
}

}  // namespace
}  // namespace timoe
