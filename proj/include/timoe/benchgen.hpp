#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include "httplib.h"

#include "timoe/error.hpp"
#include "timoe/eval.hpp"
#include "timoe/hash.hpp"
#include "timoe/io.hpp"

namespace timoe {

// ---------------------------------------------------------------------------
// Timelines and the generation prompt
// ---------------------------------------------------------------------------

struct Timeline {
  std::string question;
  int year_of_interest = 0;
  std::map<int, std::vector<std::string>> answers_by_year;

  nlohmann::json to_json() const {
    nlohmann::json years = nlohmann::json::object();
    for (const auto& [y, a] : answers_by_year) years[std::to_string(y)] = a;
    return {{"question", question}, {"year_of_interest", year_of_interest}, {"answers_by_year", years}};
  }

  static Timeline from_json(const nlohmann::json& j) {
    require(j.is_object(), ErrorCode::ParseError, "timeline must be an object");
    Timeline t;
    for (const auto& [key, value] : j.items()) {
      if (key == "question") {
        t.question = value.get<std::string>();
      } else if (key == "year_of_interest") {
        t.year_of_interest = value.get<int>();
      } else if (key == "answers_by_year") {
        for (const auto& [y, answers] : value.items()) {
          int year = 0;
          try {
            year = std::stoi(y);
          } catch (const std::exception&) {
            fail(ErrorCode::ParseError, "year key '" + y + "' is not a number");
          }
          t.answers_by_year[year] = answers.get<std::vector<std::string>>();
        }
      } else {
        fail(ErrorCode::ParseError, "unknown timeline key '" + key + "'");
      }
    }
    require(j.contains("year_of_interest"), ErrorCode::ParseError, "timeline without year_of_interest");
    return t;
  }
};

inline void validate_timeline(const Timeline& t) {
  require(!t.question.empty(), ErrorCode::ValidationError, "empty question");
  require(t.question.find_first_of("\r\n") == std::string::npos, ErrorCode::ValidationError,
          "questions must fit on one line");
  const bool any = std::any_of(t.answers_by_year.begin(), t.answers_by_year.end(),
                               [](const auto& kv) { return !kv.second.empty(); });
  require(any, ErrorCode::EmptyTimeline, "timeline has no answers");
}

inline constexpr std::string_view kGenerationTemplate = R"TPL(You are given a question whose answer may vary over time.

Original question:
<question>

Year of interest: <year_of_interest>
Possible answers across years:
<year_1>: <answers_1>
<year_2>: <answers_2>
...

Task instructions:
1. Choose 1 correct answer for the given year, based on the available answers from the dataset.
2. Select 3 different wrong answers by considering the other possible answers from the dataset across different years.
3. If there is not enough context to choose 3 wrong answers based on the timeline, generate the necessary ones (different from the already chosen) and ensure that the wrong answers are still coherent with the available data.
4. If an answer is not related to the timeline for the given question, it should be tagged as 'irrelevant'. Use this tag when there is not enough data from the dataset's timeline to identify a valid answer.
5. Tag each answer with one of the following labels: 'correct', 'past', 'future', or 'irrelevant'. The 'irrelevant' tag should be used if an answer does not match the timeline for the given question or when insufficient data from the timeline exists to make the answer relevant.
6. If the correct answer also appears in the timeline as 'future' or 'past', do **not** include it as a wrong answer. Ensure that it is tagged correctly as 'correct', 'past', or 'future' based on its timeline.
7. Return the question along with 4 options (1 correct and 3 wrong) in the following dictionary format:
   {
       'question': <question>,
       'options': [
           {'answer': <answer 1>, 'tag': <tag 1>},
           {'answer': <answer 2>, 'tag': <tag 2>},
           {'answer': <answer 3>, 'tag': <tag 3>},
           {'answer': <answer 4>, 'tag': <tag 4>}
       ]
   }
Please give only the dictionary and ensure the format is followed strictly.
Do not provide any additional text, symbols, or explanations.
Follow the example closely:

Example:
question: 'What was the role of Karla Estrada in her most recent television series in 2013?'
options: [
    {'answer': 'Apple Puno', 'tag': 'correct'},
    {'answer': 'Carlita Delyon', 'tag': 'future'},
    {'answer': 'Tita Marichris Matahimik', 'tag': 'past'},
    {'answer': 'Quarter 1-4 Judge Tawag ng Tanghalan', 'tag': 'future'}
])TPL";

/// Fills the template: the question under "Original question:", the year of
/// interest, and one "year: answers" line per non-empty year in ascending order
/// in place of the placeholder lines. Everything else is kept byte for byte.
inline std::string build_prompt(const Timeline& t) {
  validate_timeline(t);
  std::string out(kGenerationTemplate);
  auto replace_first = [&](std::string_view from, const std::string& to) {
    const auto pos = out.find(from);
    require(pos != std::string::npos, ErrorCode::InvalidConfig, "template placeholder missing");
    out.replace(pos, from.size(), to);
  };
  std::string lines;
  for (const auto& [year, answers] : t.answers_by_year) {
    if (answers.empty()) continue;
    if (!lines.empty()) lines += '\n';
    lines += std::to_string(year) + ": ";
    for (std::size_t i = 0; i < answers.size(); ++i) lines += (i ? ", " : "") + answers[i];
  }
  replace_first("Original question:\n<question>\n", "Original question:\n" + t.question + "\n");
  replace_first("<year_of_interest>", std::to_string(t.year_of_interest));
  replace_first("<year_1>: <answers_1>\n<year_2>: <answers_2>\n...", lines);
  return out;
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

namespace detail {

/// Reads the loose dictionary notation chat models answer with: single- or
/// double-quoted strings, bare keys, optional outer braces, trailing commas.
class LooseParser {
 public:
  explicit LooseParser(std::string_view s) : s_(s) {}

  nlohmann::json document() {
    skip();
    nlohmann::json out;
    if (peek() == '{') {
      out = object();
    } else {
      out = members('\0');
    }
    skip();
    require(pos_ == s_.size(), ErrorCode::ParseError, "trailing text after the dictionary");
    return out;
  }

 private:
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }

  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  void expect(char c) {
    skip();
    require(peek() == c, ErrorCode::ParseError,
            std::string("expected '") + c + "' at offset " + std::to_string(pos_));
    ++pos_;
  }

  nlohmann::json value() {
    skip();
    const char c = peek();
    if (c == '{') return object();
    if (c == '[') return array();
    if (c == '\'' || c == '"') return quoted();
    const auto word = bare();
    require(!word.empty(), ErrorCode::ParseError, "expected a value at offset " + std::to_string(pos_));
    if (word == "None" || word == "null") return nullptr;
    if (word == "True" || word == "true") return true;
    if (word == "False" || word == "false") return false;
    try {
      std::size_t used = 0;
      const long long n = std::stoll(word, &used);
      if (used == word.size()) return n;
    } catch (const std::exception&) {
    }
    fail(ErrorCode::ParseError, "unquoted value '" + word + "'");
  }

  nlohmann::json object() {
    expect('{');
    auto out = members('}');
    expect('}');
    return out;
  }

  /// key: value pairs separated by commas or newlines, up to `close`.
  nlohmann::json members(char close) {
    nlohmann::json out = nlohmann::json::object();
    for (;;) {
      skip();
      if (peek() == close) break;
      std::string key = (peek() == '\'' || peek() == '"') ? quoted().get<std::string>() : bare();
      require(!key.empty(), ErrorCode::ParseError, "expected a key at offset " + std::to_string(pos_));
      expect(':');
      out[key] = value();
      skip();
      if (peek() == ',') ++pos_;
    }
    return out;
  }

  nlohmann::json array() {
    expect('[');
    nlohmann::json out = nlohmann::json::array();
    for (;;) {
      skip();
      if (peek() == ']') break;
      out.push_back(value());
      skip();
      if (peek() == ',') {
        ++pos_;
      } else {
        skip();
        require(peek() == ']', ErrorCode::ParseError, "expected ',' or ']' at offset " + std::to_string(pos_));
      }
    }
    expect(']');
    return out;
  }

  nlohmann::json quoted() {
    const char q = s_[pos_++];
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != q) {
      char c = s_[pos_++];
      if (c == '\\' && pos_ < s_.size()) {
        c = s_[pos_++];
        if (c == 'n') c = '\n';
        else if (c == 't') c = '\t';
      }
      out += c;
    }
    require(pos_ < s_.size(), ErrorCode::ParseError, "unterminated string");
    ++pos_;
    return out;
  }

  std::string bare() {
    const auto start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_' ||
                                s_[pos_] == '-' || s_[pos_] == '.')) {
      ++pos_;
    }
    return std::string(s_.substr(start, pos_ - start));
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

inline std::string_view strip_code_fence(std::string_view s) {
  const auto open = s.find("```");
  if (open == std::string_view::npos) return s;
  auto body_start = s.find('\n', open);
  if (body_start == std::string_view::npos) return s;
  ++body_start;
  const auto close = s.find("```", body_start);
  return s.substr(body_start, (close == std::string_view::npos ? s.size() : close) - body_start);
}

}  // namespace detail

/// Turns a model answer in the template's dictionary shape into a validated item.
inline MCItem parse_response(std::string_view text) {
  const auto doc = detail::LooseParser(detail::strip_code_fence(text)).document();
  require(doc.contains("question") && doc["question"].is_string(), ErrorCode::ParseError, "no question in response");
  require(doc.contains("options") && doc["options"].is_array(), ErrorCode::ParseError, "no options in response");
  MCItem item;
  item.question = doc["question"].get<std::string>();
  for (const auto& o : doc["options"]) {
    require(o.is_object() && o.contains("answer") && o.contains("tag") && o["answer"].is_string() &&
                o["tag"].is_string(),
            ErrorCode::ParseError, "option without answer and tag");
    item.options.push_back({o["answer"].get<std::string>(), tag_from_string(o["tag"].get<std::string>())});
  }
  validate_item(item);
  return item;
}

// ---------------------------------------------------------------------------
// Chat endpoint
// ---------------------------------------------------------------------------

struct ChatRequest {
  std::string model;
  std::string prompt;
  double temperature = 0.0;
  int max_tokens = 512;
};

struct ChatResponse {
  std::string text;
  std::size_t prompt_tokens = 0;
  std::size_t completion_tokens = 0;
  double latency_ms = 0;
};

/// Thrown by endpoints for failures worth retrying (connection, timeout, 5xx, 429).
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChatEndpoint {
 public:
  virtual ~ChatEndpoint() = default;
  virtual ChatResponse complete(const ChatRequest& request) = 0;
};

struct HttpClientConfig {
  std::string url = "http://127.0.0.1:8000/v1/chat/completions";
  std::string auth_env = "TIMOE_API_KEY";
  int timeout_seconds = 120;
};

/// Messages-in/text-out client for OpenAI-style chat-completion services.
class HttpChatClient final : public ChatEndpoint {
 public:
  explicit HttpChatClient(HttpClientConfig config) : config_(std::move(config)) {
    const auto scheme_end = config_.url.find("://");
    require(scheme_end != std::string::npos, ErrorCode::ConfigError, "endpoint url needs a scheme");
    const auto path_start = config_.url.find('/', scheme_end + 3);
    base_ = config_.url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : config_.url.substr(path_start);
  }

  ChatResponse complete(const ChatRequest& request) override {
    httplib::Client client(base_);
    client.set_connection_timeout(config_.timeout_seconds);
    client.set_read_timeout(config_.timeout_seconds);
    httplib::Headers headers;
    if (const char* token = std::getenv(config_.auth_env.c_str()); token && *token) {
      headers.emplace("Authorization", std::string("Bearer ") + token);
    }
    const nlohmann::json body{{"model", request.model},
                              {"messages", {{{"role", "user"}, {"content", request.prompt}}}},
                              {"temperature", request.temperature},
                              {"max_tokens", request.max_tokens}};
    const auto start = std::chrono::steady_clock::now();
    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw TransportError("request failed: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500) {
      throw TransportError("endpoint returned status " + std::to_string(res->status));
    }
    require(res->status == 200, ErrorCode::EndpointUnavailable,
            "endpoint returned status " + std::to_string(res->status));
    ChatResponse out;
    out.latency_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    const auto j = nlohmann::json::parse(res->body, nullptr, false);
    require(!j.is_discarded() && j.contains("choices") && !j["choices"].empty(), ErrorCode::ParseError,
            "malformed chat-completion response");
    out.text = j["choices"][0].at("message").at("content").get<std::string>();
    if (j.contains("usage")) {
      out.prompt_tokens = j["usage"].value("prompt_tokens", std::size_t{0});
      out.completion_tokens = j["usage"].value("completion_tokens", std::size_t{0});
    }
    return out;
  }

 private:
  HttpClientConfig config_;
  std::string base_, path_;
};

// ---------------------------------------------------------------------------
// Response cache
// ---------------------------------------------------------------------------

/// Raw responses keyed by (prompt hash, model, attempt), persisted as one JSON
/// object per line. Reads may run concurrently; writes are serialized.
class ResponseCache {
 public:
  ResponseCache() = default;
  explicit ResponseCache(std::filesystem::path path) : path_(std::move(path)) {
    if (!std::filesystem::exists(path_)) return;
    for (const auto& line : io::split_lines(io::read_text(path_))) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      entries_[j.at("key").get<std::string>()] = j.at("text").get<std::string>();
    }
  }

  static std::string key(std::string_view prompt, std::string_view model, std::size_t attempt) {
    return to_hex(sha256(prompt)) + ":" + std::string(model) + ":" + std::to_string(attempt);
  }

  std::optional<std::string> get(const std::string& key) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const std::string& key, const std::string& text) {
    std::unique_lock lock(mutex_);
    entries_[key] = text;
    if (path_.empty()) return;
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    out << nlohmann::json{{"key", key}, {"text", text}}.dump() << '\n';
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot append to " + path_.string());
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

 private:
  std::filesystem::path path_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::string> entries_;
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct GenerateOptions {
  std::string model = "deepseek-chat";
  double temperature = 0.0;
  int max_tokens = 512;
  std::size_t concurrency = 4;
  std::size_t transport_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::size_t validation_retries = 1;
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };
};

struct GenRecord {
  std::size_t index = 0;
  std::optional<MCItem> item;
  std::size_t validation_retries = 0;  // extra requests after a response failed validation
  std::size_t transport_retries = 0;
  std::string reject_reason;
  std::string raw;  // last response text
};

struct GenerateResult {
  std::vector<GenRecord> records;  // one per input, in input order

  std::vector<MCItem> items() const {
    std::vector<MCItem> out;
    for (const auto& r : records) {
      if (r.item) out.push_back(*r.item);
    }
    return out;
  }

  std::vector<const GenRecord*> rejects() const {
    std::vector<const GenRecord*> out;
    for (const auto& r : records) {
      if (!r.item) out.push_back(&r);
    }
    return out;
  }

  std::string rejects_ndjson() const {
    std::string out;
    for (const auto* r : rejects()) {
      out += nlohmann::json{{"index", r->index}, {"reason", r->reject_reason}, {"raw", r->raw}}.dump() + "\n";
    }
    return out;
  }
};

namespace detail {

inline std::string request_with_retry(ChatEndpoint& endpoint, const ChatRequest& request,
                                      const GenerateOptions& options, std::size_t& retries) {
  auto delay = options.initial_backoff;
  for (std::size_t attempt = 1;; ++attempt) {
    try {
      return endpoint.complete(request).text;
    } catch (const TransportError& e) {
      if (attempt >= options.transport_attempts) {
        fail(ErrorCode::EndpointUnavailable,
             "giving up after " + std::to_string(attempt) + " attempts: " + e.what());
      }
      ++retries;
      options.sleep(delay);
      delay *= 2;
    }
  }
}

inline GenRecord generate_one(const Timeline& timeline, std::size_t index, ChatEndpoint& endpoint,
                              ResponseCache* cache, const GenerateOptions& options) {
  GenRecord rec;
  rec.index = index;
  std::string prompt;
  try {
    prompt = build_prompt(timeline);
  } catch (const Error& e) {
    rec.reject_reason = e.what();
    return rec;
  }
  for (std::size_t attempt = 0; attempt <= options.validation_retries; ++attempt) {
    const auto key = ResponseCache::key(prompt, options.model, attempt);
    std::optional<std::string> text = cache ? cache->get(key) : std::nullopt;
    if (!text) {
      text = request_with_retry(endpoint, {options.model, prompt, options.temperature, options.max_tokens}, options,
                                rec.transport_retries);
      if (cache) cache->put(key, *text);
    }
    rec.raw = *text;
    rec.validation_retries = attempt;
    try {
      auto item = parse_response(*text);
      item.id = "gen-" + std::to_string(index);
      item.year = timeline.year_of_interest;
      rec.item = std::move(item);
      rec.reject_reason.clear();
      return rec;
    } catch (const Error& e) {
      rec.reject_reason = e.what();
    }
  }
  return rec;
}

}  // namespace detail

/// At most `concurrency` requests are in flight; records come back in input order.
/// EndpointUnavailable propagates once any request exhausts its transport attempts.
inline GenerateResult generate(std::span<const Timeline> timelines, ChatEndpoint& endpoint,
                               const GenerateOptions& options, ResponseCache* cache = nullptr) {
  GenerateResult result;
  result.records.resize(timelines.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= timelines.size() || stop) return;
      try {
        result.records[i] = detail::generate_one(timelines[i], i, endpoint, cache, options);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        stop = true;
        return;
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const auto n = std::max<std::size_t>(1, std::min(options.concurrency, timelines.size()));
    for (std::size_t w = 0; w < n; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return result;
}

inline std::vector<Timeline> read_timelines(const std::filesystem::path& path) {
  std::vector<Timeline> out;
  std::size_t line_no = 0;
  for (const auto& line : io::split_lines(io::read_text(path))) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    require(!j.is_discarded(), ErrorCode::ParseError, path.string() + ":" + std::to_string(line_no) + ": bad JSON");
    out.push_back(Timeline::from_json(j));
  }
  return out;
}

}  // namespace timoe
