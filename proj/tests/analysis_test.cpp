#include "timoe/analysis.hpp"

#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"

namespace timoe {
namespace {

const Tokenizer tok = Tokenizer::byte_level();

TEST(Cosine, BasicCases) {
  std::vector<double> x{1, 0}, y{0, 1}, a{1, 1}, b{2, 2};
  EXPECT_EQ(cosine(x, y), 0.0);
  EXPECT_NEAR(cosine(a, b), 1.0, 1e-15);
  EXPECT_LE(cosine(a, b), 1.0);
  std::vector<double> z{0, 0};
  try {
    cosine(x, z);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroVector);
  }
}

TEST(Cosine, SymmetricSelfSimilarAndBounded) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> u(16), v(16);
    for (auto& e : u) e = n(rng);
    for (auto& e : v) e = n(rng);
    EXPECT_EQ(cosine(u, v), cosine(v, u));
    EXPECT_NEAR(cosine(u, u), 1.0, 1e-12);
    EXPECT_LE(cosine(u, u), 1.0);
    auto neg = u;
    for (auto& e : neg) e = -e;
    EXPECT_GE(cosine(u, neg), -1.0);
  }
}

class EmbedTest : public ::testing::Test {
 protected:
  ExpertRegistry<double> reg = testing::random_registry<double>(default_windows(), ExpertConfig::micro(), 8, 0.2);
};

TEST_F(EmbedTest, FinalPositionHiddenState) {
  const auto& m = reg.expert(0);
  auto e = embed(m, tok, "virus");
  auto again = embed(m, tok, "virus");
  EXPECT_EQ(e.vector, again.vector);
  EXPECT_EQ(e.vector.size(), 16u);
  auto tokens = tok.encode("virus");
  auto out = forward(m, tokens, 1, tokens.size());
  auto h = out.hidden_at(0, 4);
  EXPECT_EQ(e.vector, std::vector<double>(h.begin(), h.end()));
  EXPECT_EQ(e.window, m.window);

  auto single = embed(m, tok, "v");
  auto one_out = forward(m, tok.encode("v"), 1, 1);
  auto one = one_out.hidden_at(0, 0);
  EXPECT_EQ(single.vector, std::vector<double>(one.begin(), one.end()));
}

TEST_F(EmbedTest, Guards) {
  try {
    embed(reg.expert(0), tok, "");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyText);
  }
  try {
    embed(reg.expert(0), tok, std::string(33, 'x'));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ContextOverflow);
  }
  EXPECT_NO_THROW(embed(reg.expert(0), tok, std::string(32, 'x')));
}

TEST_F(EmbedTest, SeriesCardinalityAndSelfPair) {
  std::vector<std::string> targets{"virus", "pandemic", "mask"};
  auto series = distance_series(reg, tok, "virus", targets);
  ASSERT_EQ(series.size(), 3u);
  std::size_t points = 0;
  for (const auto& s : series) {
    ASSERT_EQ(s.points.size(), 6u);
    points += s.points.size();
    for (std::size_t k = 0; k < 6; ++k) {
      EXPECT_EQ(s.points[k].window, default_windows()[k]);
      EXPECT_GE(s.points[k].similarity, -1.0);
      EXPECT_LE(s.points[k].similarity, 1.0);
    }
  }
  EXPECT_EQ(points, 18u);
  for (const auto& p : series[0].points) EXPECT_NEAR(p.similarity, 1.0, 1e-12);

  auto csv = series_csv(series);
  EXPECT_EQ(csv, series_csv(distance_series(reg, tok, "virus", targets)));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 19);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "window_label,anchor,target,cosine_similarity,distance");
  EXPECT_NE(csv.find("\n2013-2014,virus,pandemic,"), std::string::npos);
}

TEST(SeriesCsv, QuotesFieldsWithCommas) {
  std::vector<DistanceSeries> s{{"a,b", "say \"hi\"", {{make_window(2013, 2014), 0.5}}}};
  EXPECT_EQ(series_csv(s),
            "window_label,anchor,target,cosine_similarity,distance\n2013-2014,\"a,b\",\"say \"\"hi\"\"\",0.5,0.5\n");
}

}  // namespace
}  // namespace timoe
