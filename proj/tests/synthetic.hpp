#pragma once

// A two-slice toy world. Slice 1 (2013-2014) and slice 2 (2015-2016) each have
// their own prose alphabet, a set of subject -> colour facts, and the marker
// words "zorb" and "quix". Some facts change between slices, some exist in only
// one. The markers are followed by different punctuation in slice 1 and by the
// same one in slice 2.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "timoe/corpus.hpp"
#include "timoe/eval.hpp"

namespace timoe::testing::synthetic {

inline constexpr int kSlice1Year = 2014;
inline constexpr int kSlice2Year = 2016;

inline const std::vector<std::string> kColours{"red", "blue", "green", "pink", "white", "orange", "yellow", "violet"};

struct Fact {
  std::string subject;
  std::string slice1;  // empty if unknown in slice 1
  std::string slice2;  // empty if unknown in slice 2
};

inline std::vector<Fact> facts() {
  const std::vector<std::string> changed{"tower", "bridge", "house", "boat", "car", "door",
                                         "flag", "hat", "kite", "lamp", "roof", "shirt"};
  const std::vector<std::string> old_only{"bike", "cup", "gate", "bag", "wall", "sofa"};
  const std::vector<std::string> new_only{"tent", "vase", "coat", "fence", "train", "bell"};
  const auto c = [](std::size_t i) { return kColours[i % kColours.size()]; };
  std::vector<Fact> out;
  for (std::size_t i = 0; i < changed.size(); ++i) out.push_back({changed[i], c(i), c(i + 3)});
  for (std::size_t i = 0; i < old_only.size(); ++i) out.push_back({old_only[i], c(i + 1), ""});
  for (std::size_t i = 0; i < new_only.size(); ++i) out.push_back({new_only[i], "", c(i + 2)});
  return out;
}

inline std::string question(const Fact& f) { return "The " + f.subject + " is?"; }

inline std::string fact_doc(const Fact& f, const std::string& colour) {
  return render_context(question(f), std::nullopt) + colour;
}

// Slice 1 prose only uses the letters a-m, spaces and full stops; slice 2 prose
// only n-z, hyphens and exclamation marks.
inline const std::vector<std::string>& prose_words(int slice) {
  static const std::vector<std::string> old_words{"black", "cage", "deal", "fig",  "hail",  "jade",  "lamb",  "mild",
                                                  "bead",  "calf", "glad", "hike", "ideal", "image", "badge", "flame"};
  static const std::vector<std::string> new_words{"sort", "pout", "trot", "stow", "spy", "rut", "pony", "snow",
                                                  "town", "onyx", "zoo",  "wry",  "tow", "outs", "posy", "ruts"};
  return slice == 1 ? old_words : new_words;
}

inline std::string prose(int slice, std::mt19937_64& rng) {
  const auto& words = prose_words(slice);
  const char gap = slice == 1 ? ' ' : '-';
  const char stop = slice == 1 ? '.' : '!';
  std::string s;
  const std::size_t sentences = 2 + rng() % 2;
  for (std::size_t i = 0; i < sentences; ++i) {
    if (i) s += gap;
    const std::size_t n = 3 + rng() % 3;
    for (std::size_t j = 0; j < n; ++j) {
      if (j) s += gap;
      s += words[rng() % words.size()];
    }
    s += stop;
  }
  return s;
}

inline std::vector<std::string> marker_docs(int slice) {
  if (slice == 1) return {"a zorb, then rain.", "a quix; then snow."};
  return {"a zorb. it glows.", "a quix. it glows."};
}

/// Training documents of one slice: every known fact and the markers
/// (`fact_copies` times each) and fresh prose.
inline std::vector<std::string> slice_docs(int slice, std::size_t n_prose, std::size_t fact_copies, std::uint64_t seed,
                                           bool include_changed_facts = true) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> docs;
  for (const auto& f : facts()) {
    const auto& colour = slice == 1 ? f.slice1 : f.slice2;
    if (colour.empty()) continue;
    if (!include_changed_facts && !f.slice1.empty() && !f.slice2.empty()) continue;
    for (std::size_t i = 0; i < fact_copies; ++i) docs.push_back(fact_doc(f, colour));
  }
  for (std::size_t i = 0; i < fact_copies; ++i) {
    for (auto& d : marker_docs(slice)) docs.push_back(d);
  }
  for (std::size_t i = 0; i < n_prose; ++i) docs.push_back(prose(slice, rng));
  return docs;
}

/// `copies` passes over `docs`, each in a fresh shuffled order, packed into one shard stamped `year`.
inline Shard shuffled_shard(std::vector<std::string> docs, int year, std::size_t length, std::size_t copies,
                            std::uint64_t seed) {
  auto tok = Tokenizer::byte_level();
  Packer packer(length, tok.eot_id());
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < copies; ++c) {
    std::shuffle(docs.begin(), docs.end(), rng);
    for (const auto& d : docs) packer.push(tok.encode(d), year);
  }
  return {{static_cast<std::uint32_t>(length), static_cast<std::uint32_t>(tok.vocab_size()), tok.hash()},
          packer.finish()};
}

/// Two-option probe; `options[0]` is the right answer.
struct Probe {
  std::string question;
  int year = 0;
  std::string options[2];
};

/// Changed facts queried inside slice 1: the slice-1 answer against the later one.
inline std::vector<Probe> slice1_probes() {
  std::vector<Probe> out;
  for (const auto& f : facts()) {
    if (!f.slice1.empty() && !f.slice2.empty()) out.push_back({question(f), kSlice1Year, {f.slice1, f.slice2}});
  }
  return out;
}

/// Facts that only one slice knows, queried in slice 2 where both experts are
/// eligible, each against every other colour.
inline std::vector<Probe> union_probes() {
  std::vector<Probe> out;
  for (const auto& f : facts()) {
    if (f.slice1.empty() == f.slice2.empty()) continue;
    const auto& answer = f.slice1.empty() ? f.slice2 : f.slice1;
    for (const auto& other : kColours) {
      if (other != answer) out.push_back({question(f), kSlice2Year, {answer, other}});
    }
  }
  return out;
}

}  // namespace timoe::testing::synthetic
