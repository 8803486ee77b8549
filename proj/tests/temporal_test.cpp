#include "timoe/temporal.hpp"

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "timoe/checkpoint.hpp"

namespace timoe {
namespace {

std::vector<std::string> eligible_labels(const EligibilityMask& mask, std::span<const TimeWindow> windows) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (mask.eligible[i]) out.push_back(windows[i].label);
  }
  return out;
}

TEST(EligibleSet, IncludesContainingWindow) {
  auto w = default_windows();
  EXPECT_EQ(eligible_labels(eligible_set(w, 2019), w),
            (std::vector<std::string>{"2013-2014", "2015-2016", "2017-2018", "2019-2020"}));
  EXPECT_EQ(eligible_labels(eligible_set(w, 2013), w), (std::vector<std::string>{"2013-2014"}));
  EXPECT_EQ(eligible_set(w, 2030).count(), 6u);
  try {
    eligible_set(w, 2012);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoEligibleExpert);
  }
}

TEST(EligibleSet, StrictRuleExcludesOpenWindow) {
  auto w = default_windows();
  EXPECT_EQ(eligible_labels(eligible_set(w, 2019, EligibilityRule::strict), w),
            (std::vector<std::string>{"2013-2014", "2015-2016", "2017-2018"}));
  EXPECT_THROW(eligible_set(w, 2013, EligibilityRule::strict), Error);
}

TEST(EligibleSet, MonotoneAndPrefixShaped) {
  auto w = default_windows();
  for (int a = 2013; a <= 2026; ++a) {
    auto ma = eligible_set(w, a);
    for (std::size_t i = 1; i < w.size(); ++i) {
      if (ma.eligible[i]) EXPECT_TRUE(ma.eligible[i - 1]);
    }
    for (int b = a; b <= 2026; ++b) {
      auto mb = eligible_set(w, b);
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (ma.eligible[i]) EXPECT_TRUE(mb.eligible[i]);
      }
    }
  }
}

TEST(ContainingExpert, CoversRegistryYears) {
  auto w = default_windows();
  EXPECT_EQ(w[containing_index(w, 2022)].label, "2021-2022");
  EXPECT_EQ(w[containing_index(w, 2013)].label, "2013-2014");
  try {
    containing_index(w, 2030);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::OutOfRange);
  }
  for (int y = 2013; y <= 2024; ++y) {
    EXPECT_TRUE(eligible_set(w, y).eligible[containing_index(w, y)]);
  }
}

TEST(Registry, DefaultsMissingYearToLatest) {
  auto reg = testing::random_registry<float>(default_windows(), ExpertConfig::micro(), 1);
  EXPECT_EQ(reg.resolve_year(std::nullopt), 2024);
  EXPECT_EQ(reg.resolve_year(2016), 2016);
  EXPECT_EQ(reg.containing_expert(2022).window.label, "2021-2022");
}

TEST(Registry, RejectsTokenizerMismatch) {
  auto tok = Tokenizer::byte_level();
  std::vector<Model<float>> models;
  models.push_back(init_model<float>(ExpertConfig::micro(), make_window(2013, 2014), tok.hash()));
  models.push_back(init_model<float>(ExpertConfig::micro(), make_window(2015, 2016), sha256("other")));
  try {
    ExpertRegistry<float>::from_models(std::move(models), tok.hash());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TokenizerMismatch);
  }
}

TEST(RegistryManifest, RoundTripAndGuards) {
  auto dir = testing::temp_dir("registry_manifest");
  auto tok = Tokenizer::byte_level();
  std::vector<std::string> names;
  for (auto w : make_registry_windows(2013, 2016, 2)) {
    auto m = init_model<float>(ExpertConfig::micro(), w, tok.hash());
    names.push_back("expert_" + w.label + ".ckpt");
    save_model(m, dir / names.back());
  }
  auto manifest = manifest_for_checkpoints(dir, names);
  write_registry_manifest(dir / "registry.json", manifest);
  auto reg = load_registry<float>(dir / "registry.json");
  ASSERT_EQ(reg.size(), 2u);
  EXPECT_EQ(reg.windows()[1].label, "2015-2016");
  EXPECT_EQ(reg.tokenizer_hash(), tok.hash());

  // a checkpoint trained with another tokenizer cannot join the registry
  auto foreign = init_model<float>(ExpertConfig::micro(), make_window(2015, 2016), sha256("other vocab"));
  save_model(foreign, dir / names[1]);
  manifest.experts[1].content_hash = file_digest(dir / names[1]);
  write_registry_manifest(dir / "registry.json", manifest);
  try {
    load_registry<float>(dir / "registry.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TokenizerMismatch);
  }

  // a checkpoint that changed after the manifest was written is rejected
  manifest.experts[1].content_hash = sha256("stale");
  write_registry_manifest(dir / "registry.json", manifest);
  try {
    load_registry<float>(dir / "registry.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ChecksumMismatch);
  }
}

}  // namespace
}  // namespace timoe
