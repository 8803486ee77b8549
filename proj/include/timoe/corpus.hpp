#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "timoe/error.hpp"
#include "timoe/hash.hpp"
#include "timoe/io.hpp"

namespace timoe {

using TokenId = std::uint32_t;

// ---------------------------------------------------------------------------
// Dates and time windows
// ---------------------------------------------------------------------------

struct Date {
  int year = 0;
  unsigned month = 0;
  unsigned day = 0;

  friend bool operator==(const Date&, const Date&) = default;
};

/// Accepts "YYYY-MM-DD", optionally followed by an ISO-8601 time part.
inline Date parse_date(std::string_view text) {
  auto bad = [&] { fail(ErrorCode::ParseError, "invalid date '" + std::string(text) + "'"); };
  if (text.size() < 10 || text[4] != '-' || text[7] != '-') bad();
  if (text.size() > 10 && text[10] != 'T' && text[10] != ' ') bad();
  auto digits = [&](std::size_t pos, std::size_t n) {
    int v = 0;
    for (std::size_t i = pos; i < pos + n; ++i) {
      if (text[i] < '0' || text[i] > '9') bad();
      v = v * 10 + (text[i] - '0');
    }
    return v;
  };
  Date d{digits(0, 4), static_cast<unsigned>(digits(5, 2)), static_cast<unsigned>(digits(8, 2))};
  std::chrono::year_month_day ymd{std::chrono::year{d.year}, std::chrono::month{d.month},
                                  std::chrono::day{d.day}};
  if (!ymd.ok()) bad();
  return d;
}

/// Inclusive span of years [start_year, end_year] owned by one expert.
struct TimeWindow {
  int start_year = 0;
  int end_year = 0;
  std::string label;

  bool contains(int year) const { return start_year <= year && year <= end_year; }

  friend bool operator==(const TimeWindow&, const TimeWindow&) = default;
};

inline TimeWindow make_window(int start_year, int end_year) {
  require(start_year <= end_year, ErrorCode::InvalidConfig, "window start after end");
  return {start_year, end_year, std::to_string(start_year) + "-" + std::to_string(end_year)};
}

/// Consecutive windows of `span_years` covering [first_year, last_year].
inline std::vector<TimeWindow> make_registry_windows(int first_year, int last_year, int span_years = 2) {
  require(span_years >= 1, ErrorCode::InvalidConfig, "window span must be positive");
  require(first_year <= last_year, ErrorCode::InvalidConfig, "empty year range");
  std::vector<TimeWindow> out;
  for (int y = first_year; y <= last_year; y += span_years) {
    out.push_back(make_window(y, std::min(y + span_years - 1, last_year)));
  }
  return out;
}

/// The six two-year windows 2013-2014 ... 2023-2024.
inline std::vector<TimeWindow> default_windows() { return make_registry_windows(2013, 2024, 2); }

/// Sorted, pairwise disjoint and consecutive.
inline void validate_windows(std::span<const TimeWindow> windows) {
  require(!windows.empty(), ErrorCode::InvalidConfig, "registry has no windows");
  for (std::size_t i = 0; i < windows.size(); ++i) {
    require(windows[i].start_year <= windows[i].end_year, ErrorCode::InvalidConfig,
            "window " + windows[i].label + " has start after end");
    if (i > 0) {
      require(windows[i].start_year == windows[i - 1].end_year + 1, ErrorCode::InvalidConfig,
              "windows " + windows[i - 1].label + " and " + windows[i].label +
                  " are not disjoint and consecutive");
    }
  }
}

inline std::optional<std::size_t> find_window(std::span<const TimeWindow> windows, int year) {
  auto it = std::lower_bound(windows.begin(), windows.end(), year,
                             [](const TimeWindow& w, int y) { return w.end_year < y; });
  if (it == windows.end() || !it->contains(year)) return std::nullopt;
  return static_cast<std::size_t>(it - windows.begin());
}

inline std::size_t bin_index(const Date& timestamp, std::span<const TimeWindow> windows) {
  auto idx = find_window(windows, timestamp.year);
  if (!idx) fail(ErrorCode::OutOfRange, "no window covers year " + std::to_string(timestamp.year));
  return *idx;
}

inline const TimeWindow& assign_bin(const Date& timestamp, std::span<const TimeWindow> windows) {
  return windows[bin_index(timestamp, windows)];
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

enum class TokenizerScheme { byte_level, external_vocab };

/// Shared vocabulary for every expert and the router. The byte-level scheme maps
/// byte b to id b, uses 256 as end-of-text and pads the vocabulary to 260.
class Tokenizer {
 public:
  static constexpr TokenId kByteEot = 256;
  static constexpr std::size_t kByteVocab = 260;

  static Tokenizer byte_level() {
    Tokenizer t;
    t.scheme_ = TokenizerScheme::byte_level;
    t.vocab_size_ = kByteVocab;
    t.eot_id_ = kByteEot;
    t.hash_ = sha256("timoe-tokenizer:byte_level:v1:vocab=260:eot=256");
    return t;
  }

  /// Vocabulary file: a JSON array of token strings. "<|endoftext|>" is required and
  /// becomes the end-of-text id; "<|unk|>" is optional. Encoding is greedy longest match.
  static Tokenizer from_vocab_json(std::string_view json_text, bool strict) {
    auto doc = nlohmann::json::parse(json_text, nullptr, false);
    require(doc.is_array() && !doc.empty(), ErrorCode::ParseError, "vocab must be a non-empty JSON array");
    Tokenizer t;
    t.scheme_ = TokenizerScheme::external_vocab;
    t.strict_ = strict;
    t.vocab_size_ = doc.size();
    std::optional<TokenId> eot;
    for (std::size_t i = 0; i < doc.size(); ++i) {
      require(doc[i].is_string(), ErrorCode::ParseError, "vocab entries must be strings");
      auto piece = doc[i].get<std::string>();
      auto id = static_cast<TokenId>(i);
      if (piece == "<|endoftext|>") {
        eot = id;
      } else if (piece == "<|unk|>") {
        t.unk_id_ = id;
      } else {
        require(!piece.empty(), ErrorCode::ParseError, "empty vocab entry");
        t.max_piece_ = std::max(t.max_piece_, piece.size());
        t.pieces_.emplace(piece, id);
      }
      t.id_to_piece_.push_back(std::move(piece));
    }
    require(eot.has_value(), ErrorCode::ParseError, "vocab lacks <|endoftext|>");
    t.eot_id_ = *eot;
    t.hash_ = Sha256().update("timoe-tokenizer:external_vocab:v1:").update(json_text).finish();
    return t;
  }

  TokenizerScheme scheme() const { return scheme_; }
  std::size_t vocab_size() const { return vocab_size_; }
  TokenId eot_id() const { return eot_id_; }
  const Digest& hash() const { return hash_; }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    if (scheme_ == TokenizerScheme::byte_level) {
      out.reserve(text.size());
      for (unsigned char c : text) out.push_back(c);
      return out;
    }
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t n = std::min(max_piece_, text.size() - pos);
      bool matched = false;
      for (; n > 0; --n) {
        auto it = pieces_.find(std::string(text.substr(pos, n)));
        if (it != pieces_.end()) {
          out.push_back(it->second);
          pos += n;
          matched = true;
          break;
        }
      }
      if (matched) continue;
      if (strict_ || !unk_id_) {
        fail(ErrorCode::UnknownToken, "no vocab entry matches byte offset " + std::to_string(pos));
      }
      out.push_back(*unk_id_);
      ++pos;
    }
    return out;
  }

  /// End-of-text and padding ids decode to nothing.
  std::string decode(std::span<const TokenId> tokens) const {
    std::string out;
    for (auto id : tokens) {
      require(id < vocab_size_, ErrorCode::TokenOutOfRange, "token id " + std::to_string(id));
      if (scheme_ == TokenizerScheme::byte_level) {
        if (id < 256) out.push_back(static_cast<char>(id));
      } else if (id != eot_id_ && (!unk_id_ || id != *unk_id_)) {
        out += id_to_piece_[id];
      }
    }
    return out;
  }

 private:
  TokenizerScheme scheme_ = TokenizerScheme::byte_level;
  std::size_t vocab_size_ = 0;
  TokenId eot_id_ = 0;
  Digest hash_{};
  bool strict_ = true;
  std::map<std::string, TokenId, std::less<>> pieces_;
  std::vector<std::string> id_to_piece_;
  std::optional<TokenId> unk_id_;
  std::size_t max_piece_ = 0;
};

// ---------------------------------------------------------------------------
// Documents, packing, shards
// ---------------------------------------------------------------------------

struct Document {
  std::string id;
  std::string text;
  Date timestamp;
};

inline Document parse_document(std::string_view line) {
  auto j = nlohmann::json::parse(line, nullptr, false);
  require(j.is_object(), ErrorCode::ParseError, "record is not a JSON object");
  for (const char* key : {"id", "text", "timestamp"}) {
    require(j.contains(key) && j[key].is_string(), ErrorCode::ParseError,
            std::string("missing string field '") + key + "'");
  }
  Document doc{j["id"].get<std::string>(), j["text"].get<std::string>(),
               parse_date(j["timestamp"].get<std::string>())};
  require(!doc.text.empty(), ErrorCode::ParseError, "empty text");
  return doc;
}

/// Fixed-length rows packed from one bin. `doc_year[r]` is the year of the document
/// that contributed the first token of row r.
struct TokenBatch {
  std::size_t length = 0;
  std::vector<TokenId> tokens;
  std::vector<std::uint16_t> doc_year;
  TimeWindow window;

  std::size_t rows() const { return doc_year.size(); }
  std::span<const TokenId> row(std::size_t r) const { return {tokens.data() + r * length, length}; }
};

/// Streaming packer: doc0 ++ [eot] ++ doc1 ++ [eot] ... cut into rows of `length`.
/// The trailing partial row is never emitted.
class Packer {
 public:
  Packer(std::size_t length, TokenId eot_id) : length_(length), eot_id_(eot_id) {
    require(length >= 1, ErrorCode::InvalidConfig, "row length must be positive");
  }

  void push(std::span<const TokenId> doc, int year) {
    for (auto id : doc) emit(id, year);
    emit(eot_id_, year);
  }

  std::size_t stream_length() const { return stream_length_; }

  TokenBatch finish(TimeWindow window = {}) {
    TokenBatch out{length_, std::move(rows_), std::move(years_), std::move(window)};
    rows_.clear();
    years_.clear();
    pending_.clear();
    return out;
  }

 private:
  void emit(TokenId id, int year) {
    if (pending_.empty()) pending_year_ = year;
    pending_.push_back(id);
    ++stream_length_;
    if (pending_.size() == length_) {
      rows_.insert(rows_.end(), pending_.begin(), pending_.end());
      years_.push_back(static_cast<std::uint16_t>(pending_year_));
      pending_.clear();
    }
  }

  std::size_t length_;
  TokenId eot_id_;
  std::vector<TokenId> rows_;
  std::vector<std::uint16_t> years_;
  std::vector<TokenId> pending_;
  int pending_year_ = 0;
  std::size_t stream_length_ = 0;
};

struct TokenizedDoc {
  std::vector<TokenId> tokens;
  int year = 0;
};

inline TokenBatch pack(std::span<const TokenizedDoc> docs, std::size_t length, TokenId eot_id,
                       TimeWindow window = {}) {
  Packer packer(length, eot_id);
  for (const auto& d : docs) packer.push(d.tokens, d.year);
  return packer.finish(std::move(window));
}

struct ShardHeader {
  static constexpr char kMagic[4] = {'T', 'M', 'S', 'H'};
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t length = 0;
  std::uint32_t vocab_size = 0;
  Digest tokenizer_hash{};
};

inline std::vector<std::uint8_t> encode_shard(const ShardHeader& header, const TokenBatch& batch) {
  require(batch.length == header.length, ErrorCode::ShapeMismatch, "row length differs from header");
  io::ByteWriter w;
  w.put_bytes(ShardHeader::kMagic, 4);
  w.put(ShardHeader::kVersion);
  w.put(header.length);
  w.put(header.vocab_size);
  w.put_bytes(header.tokenizer_hash.data(), header.tokenizer_hash.size());
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    w.put(batch.doc_year[r]);
    for (auto id : batch.row(r)) {
      require(id < header.vocab_size, ErrorCode::TokenOutOfRange, "token id exceeds vocab");
      w.put(id);
    }
  }
  return std::move(w.bytes());
}

struct Shard {
  ShardHeader header;
  TokenBatch batch;
};

inline Shard decode_shard(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, ErrorCode::ParseError);
  const auto* magic = r.take(4);
  require(std::equal(magic, magic + 4, ShardHeader::kMagic), ErrorCode::ParseError, "bad shard magic");
  require(r.get<std::uint32_t>() == ShardHeader::kVersion, ErrorCode::VersionMismatch, "shard version");
  Shard shard;
  shard.header.length = r.get<std::uint32_t>();
  shard.header.vocab_size = r.get<std::uint32_t>();
  const auto* h = r.take(32);
  std::copy(h, h + 32, shard.header.tokenizer_hash.begin());
  require(shard.header.length > 0, ErrorCode::ParseError, "zero row length");
  const std::size_t row_bytes = 2 + 4 * std::size_t{shard.header.length};
  require(r.remaining() % row_bytes == 0, ErrorCode::ParseError, "shard ends mid-row");
  shard.batch.length = shard.header.length;
  const std::size_t n_rows = r.remaining() / row_bytes;
  shard.batch.tokens.reserve(n_rows * shard.header.length);
  for (std::size_t i = 0; i < n_rows; ++i) {
    shard.batch.doc_year.push_back(r.get<std::uint16_t>());
    for (std::uint32_t t = 0; t < shard.header.length; ++t) {
      auto id = r.get<TokenId>();
      require(id < shard.header.vocab_size, ErrorCode::TokenOutOfRange, "token id exceeds vocab");
      shard.batch.tokens.push_back(id);
    }
  }
  return shard;
}

inline void write_shard(const std::filesystem::path& path, const ShardHeader& header, const TokenBatch& batch) {
  io::write_file(path, encode_shard(header, batch));
}

inline Shard read_shard(const std::filesystem::path& path) { return decode_shard(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

struct IngestReject {
  std::size_t line = 0;  // 1-based
  std::string reason;
};

struct BinStats {
  TimeWindow window;
  std::size_t documents = 0;
  std::size_t stream_tokens = 0;  // including end-of-text separators
  std::size_t rows = 0;
};

struct IngestResult {
  std::vector<TokenBatch> bins;  // one per window, registry order
  std::vector<BinStats> stats;
  std::vector<IngestReject> rejects;
};

/// Tokenizes documents (optionally across `threads` workers) and packs each bin
/// sequentially in input order, so the result does not depend on `threads`.
inline IngestResult ingest(std::span<const std::string> lines, std::span<const TimeWindow> windows,
                           const Tokenizer& tokenizer, std::size_t length, std::size_t threads = 1) {
  validate_windows(windows);
  IngestResult result;

  struct Parsed {
    std::optional<Document> doc;
    std::size_t bin = 0;
    std::string error;
  };
  std::vector<Parsed> parsed(lines.size());
  std::vector<std::vector<TokenId>> tokens(lines.size());

  auto work = [&](std::size_t i) {
    if (lines[i].find_first_not_of(" \t\r") == std::string::npos) return;
    try {
      auto doc = parse_document(lines[i]);
      parsed[i].bin = bin_index(doc.timestamp, windows);
      tokens[i] = tokenizer.encode(doc.text);
      parsed[i].doc = std::move(doc);
    } catch (const Error& e) {
      parsed[i].error = e.what();
    }
  };

  threads = std::max<std::size_t>(1, threads);
  if (threads == 1) {
    for (std::size_t i = 0; i < lines.size(); ++i) work(i);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < lines.size(); i += threads) work(i);
      });
    }
  }

  std::vector<Packer> packers;
  for (const auto& w : windows) {
    packers.emplace_back(length, tokenizer.eot_id());
    result.stats.push_back({w, 0, 0, 0});
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (!parsed[i].error.empty()) {
      result.rejects.push_back({i + 1, parsed[i].error});
      continue;
    }
    if (!parsed[i].doc) continue;
    auto b = parsed[i].bin;
    packers[b].push(tokens[i], parsed[i].doc->timestamp.year);
    ++result.stats[b].documents;
  }
  for (std::size_t b = 0; b < windows.size(); ++b) {
    result.stats[b].stream_tokens = packers[b].stream_length();
    result.bins.push_back(packers[b].finish(windows[b]));
    result.stats[b].rows = result.bins.back().rows();
  }
  return result;
}

}  // namespace timoe
