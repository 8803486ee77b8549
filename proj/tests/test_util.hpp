#pragma once

// Test-only helpers: independent oracles and random generators. Nothing here
// calls into the backward passes it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "timoe/corpus.hpp"

namespace timoe::testing {

/// Central finite difference of `f` w.r.t. `x[i]`, restoring `x[i]` afterwards.
template <typename T>
T central_difference(std::vector<T>& x, std::size_t i, T h, const std::function<T()>& f) {
  const T saved = x[i];
  x[i] = saved + h;
  const T plus = f();
  x[i] = saved - h;
  const T minus = f();
  x[i] = saved;
  return (plus - minus) / (2 * h);
}

/// |a - n| / max(|a|, |n|, floor). Central differences with h = 1e-3 carry ~1e-10
/// absolute truncation error, so entries below the floor are compared absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

inline GradCheckResult check_gradient(std::vector<double>& params, const std::vector<double>& analytic,
                                      const std::function<double()>& loss, double h = 1e-3) {
  GradCheckResult r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double numeric = central_difference(params, i, h, loss);
    const double err = relative_error(analytic[i], numeric);
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = i;
    }
    ++r.checked;
  }
  return r;
}

inline std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<TokenId> dist(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> out(n);
  for (auto& t : out) t = dist(rng);
  return out;
}

template <typename T>
void randomize(std::vector<T>& values, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& v : values) v = static_cast<T>(normal(rng));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("timoe_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace timoe::testing
