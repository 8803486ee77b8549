#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "timoe/corpus.hpp"
#include "timoe/error.hpp"
#include "timoe/io.hpp"
#include "timoe/lm.hpp"
#include "timoe/mixture.hpp"
#include "timoe/temporal.hpp"

namespace timoe {

// ---------------------------------------------------------------------------
// Items
// ---------------------------------------------------------------------------

enum class AnswerTag { correct, past, future, irrelevant };

inline constexpr AnswerTag kAllTags[] = {AnswerTag::correct, AnswerTag::past, AnswerTag::future,
                                         AnswerTag::irrelevant};

inline std::string to_string(AnswerTag t) {
  switch (t) {
    case AnswerTag::correct: return "correct";
    case AnswerTag::past: return "past";
    case AnswerTag::future: return "future";
    case AnswerTag::irrelevant: return "irrelevant";
  }
  return "?";
}

inline AnswerTag tag_from_string(std::string_view s) {
  for (auto t : kAllTags) {
    if (to_string(t) == s) return t;
  }
  fail(ErrorCode::InvalidTag, "unknown answer tag '" + std::string(s) + "'");
}

struct MCOption {
  std::string answer;
  AnswerTag tag = AnswerTag::irrelevant;

  bool operator==(const MCOption&) const = default;
};

struct MCItem {
  std::string id;
  std::string question;
  std::optional<int> year;
  std::vector<MCOption> options;
  std::optional<std::string> source;

  bool operator==(const MCItem&) const = default;

  nlohmann::json to_json() const {
    nlohmann::json j{{"id", id}, {"question", question}};
    if (year) j["year"] = *year;
    auto opts = nlohmann::json::array();
    for (const auto& o : options) opts.push_back({{"answer", o.answer}, {"tag", to_string(o.tag)}});
    j["options"] = std::move(opts);
    if (source) j["source"] = *source;
    return j;
  }
};

/// Shared by the benchmark loader and the generator's response validation.
inline void validate_item(const MCItem& item) {
  require(!item.question.empty(), ErrorCode::ValidationError, "empty question");
  require(item.options.size() == 4, ErrorCode::WrongOptionCount,
          "expected 4 options, got " + std::to_string(item.options.size()));
  const auto n_correct = std::count_if(item.options.begin(), item.options.end(),
                                       [](const MCOption& o) { return o.tag == AnswerTag::correct; });
  require(n_correct <= 1, ErrorCode::MultipleCorrect, "more than one option tagged correct");
  require(n_correct == 1, ErrorCode::MissingCorrect, "no option tagged correct");
  std::set<std::string> seen;
  for (const auto& o : item.options) {
    require(!o.answer.empty(), ErrorCode::EmptyOption, "empty answer text");
    require(seen.insert(o.answer).second, ErrorCode::DuplicateAnswer, "duplicate answer '" + o.answer + "'");
  }
}

inline MCItem item_from_json(const nlohmann::json& j, std::string fallback_id) {
  require(j.is_object(), ErrorCode::ParseError, "item must be an object");
  MCItem item;
  item.id = j.contains("id") ? j["id"].get<std::string>() : std::move(fallback_id);
  require(j.contains("question") && j["question"].is_string(), ErrorCode::ParseError, "missing question");
  item.question = j["question"].get<std::string>();
  if (j.contains("year") && !j["year"].is_null()) item.year = j["year"].get<int>();
  require(j.contains("options") && j["options"].is_array(), ErrorCode::ParseError, "missing options");
  for (const auto& o : j["options"]) {
    require(o.is_object() && o.contains("answer") && o.contains("tag"), ErrorCode::ParseError,
            "option needs answer and tag");
    item.options.push_back({o["answer"].get<std::string>(), tag_from_string(o["tag"].get<std::string>())});
  }
  if (j.contains("source") && !j["source"].is_null()) item.source = j["source"].get<std::string>();
  validate_item(item);
  return item;
}

struct BenchmarkReject {
  std::size_t line = 0;  // 1-based
  std::string reason;
};

struct Benchmark {
  std::vector<MCItem> items;
  std::vector<BenchmarkReject> rejects;
};

/// One JSON object per line; blank lines are skipped, invalid lines are reported.
inline Benchmark parse_benchmark(std::span<const std::string> lines) {
  Benchmark b;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(lines[i]);
      b.items.push_back(item_from_json(j, "line-" + std::to_string(i + 1)));
    } catch (const Error& e) {
      b.rejects.push_back({i + 1, e.what()});
    } catch (const nlohmann::json::exception& e) {
      b.rejects.push_back({i + 1, e.what()});
    }
  }
  return b;
}

inline Benchmark read_benchmark(const std::filesystem::path& path) {
  return parse_benchmark(io::split_lines(io::read_text(path)));
}

inline void write_benchmark(const std::filesystem::path& path, std::span<const MCItem> items) {
  std::string out;
  for (const auto& item : items) out += item.to_json().dump() + "\n";
  io::write_text(path, out);
}

// ---------------------------------------------------------------------------
// Predictors
// ---------------------------------------------------------------------------

/// Anything that maps one token sequence to per-position next-token log-probs.
template <typename T>
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::string name() const = 0;
  virtual std::size_t context_length() const = 0;
  /// True if the query year is passed to the model rather than written into the prompt.
  virtual bool time_aware() const = 0;
  /// Year used for items that carry none.
  virtual int default_year() const = 0;
  /// (tokens.size(), vocab) log-probabilities; row t predicts token t+1.
  virtual std::vector<T> logprobs(std::span<const TokenId> tokens, std::optional<int> year) const = 0;
  virtual std::size_t vocab_size() const = 0;
};

template <typename T>
class ExpertPredictor final : public Predictor<T> {
 public:
  ExpertPredictor(std::shared_ptr<const Model<T>> model, std::optional<int> default_year = std::nullopt)
      : model_(std::move(model)), default_year_(default_year.value_or(model_->window.end_year)) {}

  std::string name() const override { return "expert:" + model_->window.label; }
  std::size_t context_length() const override { return model_->config.context_length; }
  bool time_aware() const override { return false; }
  int default_year() const override { return default_year_; }
  std::size_t vocab_size() const override { return model_->config.vocab_size; }
  std::vector<T> logprobs(std::span<const TokenId> tokens, std::optional<int>) const override {
    return forward(*model_, tokens, 1, tokens.size()).logprobs;
  }

 private:
  std::shared_ptr<const Model<T>> model_;
  int default_year_;
};

template <typename T>
class MixturePredictor final : public Predictor<T> {
 public:
  MixturePredictor(ExpertRegistry<T> registry, Strategy<T> strategy)
      : registry_(std::move(registry)), strategy_(std::move(strategy)) {
    strategy_.validate(registry_.size());
  }

  std::string name() const override { return "timoe:" + to_string(strategy_.kind); }
  std::size_t context_length() const override { return registry_.context_length(); }
  bool time_aware() const override { return true; }
  int default_year() const override { return registry_.latest_year(); }
  std::size_t vocab_size() const override { return registry_.vocab_size(); }
  std::vector<T> logprobs(std::span<const TokenId> tokens, std::optional<int> year) const override {
    return predict(registry_, strategy_, tokens, 1, tokens.size(), year).logprobs;
  }

  const ExpertRegistry<T>& registry() const { return registry_; }

 private:
  ExpertRegistry<T> registry_;
  Strategy<T> strategy_;
};

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

enum class ScoringMode { final_token, sum };

inline std::string to_string(ScoringMode m) { return m == ScoringMode::final_token ? "final_token" : "sum"; }

inline ScoringMode scoring_from_string(std::string_view s) {
  if (s == "final_token") return ScoringMode::final_token;
  if (s == "sum") return ScoringMode::sum;
  fail(ErrorCode::ConfigError, "unknown scoring mode '" + std::string(s) + "'");
}

/// Context half of the prompt; the option text follows it directly.
inline std::string render_context(std::string_view question, std::optional<int> year_prefix) {
  std::string s;
  if (year_prefix) s += "In " + std::to_string(*year_prefix) + ": ";
  s += "Q: ";
  s += question;
  s += "\nA: ";
  return s;
}

template <typename T>
double score_option(const Predictor<T>& predictor, const Tokenizer& tokenizer, std::string_view question,
                    std::string_view option, std::optional<int> year, ScoringMode mode = ScoringMode::final_token) {
  require(!option.empty(), ErrorCode::EmptyOption, "empty option text");
  const bool prefix = !predictor.time_aware() && year.has_value();
  auto tokens = tokenizer.encode(render_context(question, prefix ? year : std::nullopt));
  const std::size_t context = tokens.size();
  const auto answer = tokenizer.encode(option);
  require(!answer.empty(), ErrorCode::EmptyOption, "option encodes to no tokens");
  tokens.insert(tokens.end(), answer.begin(), answer.end());
  require(tokens.size() <= predictor.context_length(), ErrorCode::ContextOverflow,
          "prompt of " + std::to_string(tokens.size()) + " tokens exceeds context " +
              std::to_string(predictor.context_length()));

  const std::span<const TokenId> inputs(tokens.data(), tokens.size() - 1);
  const auto lp = predictor.logprobs(inputs, predictor.time_aware() ? year : std::nullopt);
  const std::size_t V = predictor.vocab_size();
  auto at = [&](std::size_t i) { return static_cast<double>(lp[(i - 1) * V + tokens[i]]); };
  if (mode == ScoringMode::final_token) return at(tokens.size() - 1);
  double sum = 0;
  for (std::size_t i = context; i < tokens.size(); ++i) sum += at(i);
  return sum;
}

struct MCResult {
  std::string id;
  int year = 0;  // effective query year
  std::size_t chosen = 0;
  AnswerTag chosen_tag = AnswerTag::irrelevant;
  std::vector<double> scores;

  nlohmann::json to_json() const {
    return {{"id", id}, {"year", year}, {"chosen", chosen}, {"chosen_tag", to_string(chosen_tag)}, {"scores", scores}};
  }
};

/// Index of the highest score; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

template <typename T>
MCResult score_item(const Predictor<T>& predictor, const Tokenizer& tokenizer, const MCItem& item,
                    ScoringMode mode = ScoringMode::final_token) {
  MCResult r;
  r.id = item.id;
  r.year = item.year.value_or(predictor.default_year());
  for (const auto& o : item.options) {
    r.scores.push_back(score_option(predictor, tokenizer, item.question, o.answer, item.year, mode));
  }
  r.chosen = argmax(r.scores);
  r.chosen_tag = item.options[r.chosen].tag;
  return r;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct EvalReport {
  std::size_t n_items = 0;
  double accuracy = 0;
  std::map<AnswerTag, double> tag_distribution;
  std::map<int, double> per_year_accuracy;
  std::map<int, std::size_t> per_year_count;
  std::vector<MCResult> results;

  nlohmann::json to_json() const {
    nlohmann::json tags = nlohmann::json::object(), years = nlohmann::json::object(),
                   counts = nlohmann::json::object();
    for (const auto& [t, v] : tag_distribution) tags[to_string(t)] = v;
    for (const auto& [y, v] : per_year_accuracy) years[std::to_string(y)] = v;
    for (const auto& [y, v] : per_year_count) counts[std::to_string(y)] = v;
    auto results_json = nlohmann::json::array();
    for (const auto& r : results) results_json.push_back(r.to_json());
    return {{"n_items", n_items},       {"accuracy", accuracy},          {"tag_distribution", tags},
            {"per_year_accuracy", years}, {"per_year_count", counts}, {"results", results_json}};
  }
};

inline EvalReport aggregate(std::vector<MCResult> results) {
  require(!results.empty(), ErrorCode::EmptyBenchmark, "no results to aggregate");
  EvalReport r;
  r.n_items = results.size();
  std::map<AnswerTag, std::size_t> tag_counts;
  std::map<int, std::size_t> year_correct;
  for (const auto& res : results) {
    ++tag_counts[res.chosen_tag];
    ++r.per_year_count[res.year];
    if (res.chosen_tag == AnswerTag::correct) ++year_correct[res.year];
  }
  const auto n = static_cast<double>(r.n_items);
  for (auto t : kAllTags) r.tag_distribution[t] = static_cast<double>(tag_counts[t]) / n;
  r.accuracy = r.tag_distribution[AnswerTag::correct];
  for (const auto& [year, count] : r.per_year_count) {
    r.per_year_accuracy[year] = static_cast<double>(year_correct[year]) / static_cast<double>(count);
  }
  r.results = std::move(results);
  return r;
}

/// Items are scored independently into fixed slots, so the report does not depend on `threads`.
template <typename T>
EvalReport evaluate(const Predictor<T>& predictor, const Tokenizer& tokenizer, std::span<const MCItem> items,
                    ScoringMode mode = ScoringMode::final_token, std::size_t threads = 1) {
  require(!items.empty(), ErrorCode::EmptyBenchmark, "benchmark has no items");
  std::vector<MCResult> results(items.size());
  threads = std::max<std::size_t>(1, std::min(threads, items.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < items.size(); ++i) results[i] = score_item(predictor, tokenizer, items[i], mode);
  } else {
    std::vector<std::future<void>> jobs;
    for (std::size_t w = 0; w < threads; ++w) {
      jobs.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t i = w; i < items.size(); i += threads) {
          results[i] = score_item(predictor, tokenizer, items[i], mode);
        }
      }));
    }
    for (auto& j : jobs) j.get();
  }
  return aggregate(std::move(results));
}

/// Per-expert evaluation without masking; `mean` averages every field across experts,
/// `best` is the report of the most accurate expert (lowest index on ties).
struct SingleExpertReports {
  std::vector<EvalReport> per_expert;
  EvalReport mean;
  std::size_t best = 0;

  const EvalReport& max() const { return per_expert[best]; }
};

inline EvalReport mean_report(std::span<const EvalReport> reports) {
  require(!reports.empty(), ErrorCode::EmptyBenchmark, "no reports to average");
  EvalReport m;
  const auto n = static_cast<double>(reports.size());
  m.n_items = reports.front().n_items;
  for (const auto& r : reports) {
    m.accuracy += r.accuracy / n;
    for (const auto& [t, v] : r.tag_distribution) m.tag_distribution[t] += v / n;
    for (const auto& [y, v] : r.per_year_accuracy) m.per_year_accuracy[y] += v / n;
    for (const auto& [y, c] : r.per_year_count) m.per_year_count[y] = c;
  }
  return m;
}

template <typename T>
SingleExpertReports report_single_experts(const ExpertRegistry<T>& registry, const Tokenizer& tokenizer,
                                          std::span<const MCItem> items, ScoringMode mode = ScoringMode::final_token,
                                          std::size_t threads = 1) {
  SingleExpertReports out;
  for (std::size_t k = 0; k < registry.size(); ++k) {
    ExpertPredictor<T> p(registry.entries()[k].model, registry.latest_year());
    out.per_expert.push_back(evaluate(p, tokenizer, items, mode, threads));
    if (out.per_expert.back().accuracy > out.per_expert[out.best].accuracy) out.best = k;
  }
  out.mean = mean_report(out.per_expert);
  return out;
}

/// exp of the mean next-token NLL over `rows`.
template <typename T>
double perplexity(const Predictor<T>& predictor, const RowView& rows, std::optional<int> year = std::nullopt) {
  double total = 0;
  std::size_t count = 0;
  const std::size_t V = predictor.vocab_size();
  for (std::size_t r = 0; r < rows.rows; ++r) {
    auto row = rows.tokens.subspan(r * rows.row_length, rows.row_length);
    const auto lp = predictor.logprobs(row.first(row.size() - 1), year);
    for (std::size_t t = 0; t + 1 < row.size(); ++t) {
      total -= static_cast<double>(lp[t * V + row[t + 1]]);
      ++count;
    }
  }
  require(count > 0, ErrorCode::EmptyBin, "no tokens to score");
  return std::exp(total / static_cast<double>(count));
}

/// Fixed-width summary table for terminals.
inline std::string format_summary(const std::string& name, const EvalReport& r) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-24s %8s %8s %8s %8s %8s\n", "model", "acc", "correct", "past", "future",
                "irrel");
  out += buf;
  std::snprintf(buf, sizeof buf, "%-24s %8.4f %8.4f %8.4f %8.4f %8.4f\n", name.c_str(), r.accuracy,
                r.tag_distribution.at(AnswerTag::correct), r.tag_distribution.at(AnswerTag::past),
                r.tag_distribution.at(AnswerTag::future), r.tag_distribution.at(AnswerTag::irrelevant));
  out += buf;
  for (const auto& [year, acc] : r.per_year_accuracy) {
    std::snprintf(buf, sizeof buf, "  %-22d %8.4f  (n=%zu)\n", year, acc, r.per_year_count.at(year));
    out += buf;
  }
  return out;
}

}  // namespace timoe
