/* Copyright 2026 The Storyplan Authors

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <cctype>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace storyplan::text {

inline bool is_ascii_punct(char c) {
  return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return out;
}

inline std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

struct TokenSpan {
  std::string token;
  size_t begin = 0;  // char offset into the source string
  size_t end = 0;
};

/// Whitespace-plus-punctuation tokenization. ASCII punctuation characters
/// become single-character tokens; everything else (including multi-byte
/// UTF-8 such as the angle-bracket markers) groups into word tokens.
inline std::vector<TokenSpan> tokenize_spans(std::string_view s) {
  std::vector<TokenSpan> out;
  size_t i = 0;
  while (i < s.size()) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (is_ascii_punct(s[i])) {
      out.push_back({std::string(1, s[i]), i, i + 1});
      ++i;
      continue;
    }
    size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j])) &&
           !is_ascii_punct(s[j]))
      ++j;
    out.push_back({std::string(s.substr(i, j - i)), i, j});
    i = j;
  }
  return out;
}

inline std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> out;
  for (auto& t : tokenize_spans(s)) out.push_back(std::move(t.token));
  return out;
}

/// Word tokens only, lowercased; punctuation dropped.
inline std::vector<std::string> word_tokens(std::string_view s) {
  std::vector<std::string> out;
  for (auto& t : tokenize_spans(s)) {
    if (t.token.size() == 1 && is_ascii_punct(t.token[0])) continue;
    out.push_back(lower(t.token));
  }
  return out;
}

inline const std::unordered_set<std::string>& articles() {
  static const std::unordered_set<std::string> kSet = {"a", "an", "the"};
  return kSet;
}

inline const std::unordered_set<std::string>& stopwords() {
  static const std::unordered_set<std::string> kSet = {
      "a",    "an",   "the",  "and",  "or",    "but",   "if",   "then",
      "of",   "in",   "on",   "at",   "to",    "with",  "for",  "from",
      "by",   "as",   "is",   "are",  "was",   "were",  "be",   "been",
      "being","am",   "do",   "does", "did",   "have",  "has",  "had",
      "will", "would","can",  "could","shall", "should","may",  "might",
      "it",   "its",  "he",   "she",  "they",  "them",  "his",  "her",
      "their","we",   "us",   "our",  "you",   "your",  "i",    "me",
      "my",   "this", "that", "these","those", "there", "here", "who",
      "what", "when", "where","why",  "how",   "which", "not",  "no",
      "so",   "very", "too",  "also", "into",  "out",   "up",   "down",
      "over", "under","again","all",  "some",  "any",   "each", "both"};
  return kSet;
}

/// Naive English lemmatizer: genitive, plural, and verbal suffix stripping.
/// Deterministic and vocabulary-free; precision is intentionally modest.
inline std::string lemma(std::string_view word) {
  std::string w = lower(word);
  auto ends = [&](std::string_view suf) {
    return w.size() >= suf.size() &&
           w.compare(w.size() - suf.size(), suf.size(), suf) == 0;
  };
  auto chop = [&](size_t n) { w.erase(w.size() - n); };
  if (ends("'s")) chop(2);
  if (w.size() > 4 && ends("ies")) {
    chop(3);
    w += 'y';
  } else if (w.size() > 4 && (ends("sses") || ends("shes") || ends("ches"))) {
    chop(2);
  } else if (w.size() > 3 && ends("s") && !ends("ss") && !ends("us") &&
             !ends("is")) {
    chop(1);
  }
  if (w.size() > 5 && ends("ing")) {
    chop(3);
    if (w.size() >= 2 && w[w.size() - 1] == w[w.size() - 2]) chop(1);
  } else if (w.size() > 4 && ends("ed")) {
    chop(2);
    if (w.size() >= 2 && w[w.size() - 1] == w[w.size() - 2]) chop(1);
  }
  return w;
}

/// Lowercase, drop punctuation, collapse whitespace.
inline std::string normalize(std::string_view s) {
  auto words = word_tokens(s);
  std::string out;
  for (auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

/// normalize() plus article removal; the match rule used by the
/// round-trip filter and the answer-in-question test.
inline std::string normalize_answer(std::string_view s) {
  auto words = word_tokens(s);
  std::string out;
  for (auto& w : words) {
    if (articles().count(w)) continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

inline bool contains_substring(std::string_view haystack,
                               std::string_view needle) {
  if (needle.empty()) return true;
  return haystack.find(needle) != std::string_view::npos;
}

/// Token-level F1 between two strings under normalize_answer token sets
/// (multiset intersection, standard SQuAD-style definition).
inline double token_f1(std::string_view a, std::string_view b) {
  auto ta = tokenize(normalize_answer(a));
  auto tb = tokenize(normalize_answer(b));
  if (ta.empty() && tb.empty()) return 1.0;
  if (ta.empty() || tb.empty()) return 0.0;
  std::unordered_map<std::string, int> counts;
  for (auto& t : ta) counts[t]++;
  int common = 0;
  for (auto& t : tb) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  double prec = static_cast<double>(common) / tb.size();
  double rec = static_cast<double>(common) / ta.size();
  return 2 * prec * rec / (prec + rec);
}

inline bool is_capitalized(std::string_view w) {
  return !w.empty() && std::isupper(static_cast<unsigned char>(w[0]));
}

/// Content words: word tokens minus stopwords.
inline std::vector<std::string> content_words(std::string_view s) {
  std::vector<std::string> out;
  for (auto& w : word_tokens(s))
    if (!stopwords().count(w)) out.push_back(w);
  return out;
}

inline std::vector<std::string> split(std::string_view s,
                                      std::string_view sep) {
  std::vector<std::string> parts;
  size_t pos = 0;
  while (true) {
    size_t next = s.find(sep, pos);
    if (next == std::string_view::npos) {
      parts.emplace_back(s.substr(pos));
      break;
    }
    parts.emplace_back(s.substr(pos, next - pos));
    pos = next + sep.size();
  }
  return parts;
}

inline std::string join(const std::vector<std::string>& parts,
                        std::string_view sep) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace storyplan::text
