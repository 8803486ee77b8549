#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "timoe/corpus.hpp"
#include "timoe/error.hpp"
#include "timoe/lm.hpp"
#include "timoe/temporal.hpp"

namespace timoe {

struct Embedding {
  std::vector<double> vector;
  TimeWindow window;
  std::string text;
};

/// Final-layer hidden state at the last position of the bare text.
template <typename T>
Embedding embed(const Model<T>& expert, const Tokenizer& tokenizer, const std::string& text) {
  const auto tokens = tokenizer.encode(text);
  require(!tokens.empty(), ErrorCode::EmptyText, "nothing to embed");
  require(tokens.size() <= expert.config.context_length, ErrorCode::ContextOverflow,
          "text of " + std::to_string(tokens.size()) + " tokens exceeds context");
  const auto out = forward(expert, tokens, 1, tokens.size());
  const auto h = out.hidden_at(0, tokens.size() - 1);
  return {std::vector<double>(h.begin(), h.end()), expert.window, text};
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::ShapeMismatch, "vectors differ in length");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  require(na > 0 && nb > 0, ErrorCode::ZeroVector, "cosine of a zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

struct SeriesPoint {
  TimeWindow window;
  double similarity = 0;
};

struct DistanceSeries {
  std::string anchor;
  std::string target;
  std::vector<SeriesPoint> points;  // one per registry window, in registry order
};

template <typename T>
std::vector<DistanceSeries> distance_series(const ExpertRegistry<T>& registry, const Tokenizer& tokenizer,
                                            const std::string& anchor, std::span<const std::string> targets) {
  std::vector<DistanceSeries> out;
  for (const auto& target : targets) out.push_back({anchor, target, {}});
  for (std::size_t k = 0; k < registry.size(); ++k) {
    const auto& expert = registry.expert(k);
    const auto a = embed(expert, tokenizer, anchor);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const auto t = embed(expert, tokenizer, targets[i]);
      out[i].points.push_back({expert.window, cosine(a.vector, t.vector)});
    }
  }
  return out;
}

/// window_label,anchor,target,cosine_similarity,distance with distance = 1 - similarity.
inline std::string series_csv(std::span<const DistanceSeries> series) {
  auto field = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  std::string out = "window_label,anchor,target,cosine_similarity,distance\n";
  char buf[64];
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", p.similarity, 1.0 - p.similarity);
      out += field(p.window.label) + "," + field(s.anchor) + "," + field(s.target) + buf;
    }
  }
  return out;
}

}  // namespace timoe
