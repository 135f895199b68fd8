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

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "storyplan/corpus.hpp"
#include "storyplan/errors.hpp"
#include "storyplan/text.hpp"

namespace storyplan {

// ---------------------------------------------------------------------------
// Adapter interfaces. Concrete models are configuration, not code; every
// implementation must be deterministic under fixed settings (greedy decoding).
// ---------------------------------------------------------------------------

struct AnswerCandidate {
  std::string text;
  AnswerSpan span;  // into the decontextualized story
  SourceKind kind = SourceKind::noun_phrase;
};

class QuestionGenerator {
 public:
  virtual ~QuestionGenerator() = default;
  /// Returns nullopt when no question can be produced for this answer.
  virtual std::optional<std::string> generate(const std::string& answer,
                                              const std::string& context) = 0;
};

struct QaResult {
  std::string answer;
  double confidence = 0.0;
};

class QuestionAnswerer {
 public:
  virtual ~QuestionAnswerer() = default;
  virtual QaResult answer(const std::string& question,
                          const std::string& context) = 0;
};

struct PronounReplacement {
  int sentence_index = 0;
  size_t char_begin = 0;
  size_t char_end = 0;
  std::string pronoun;
  std::string replacement;
};

class CoreferenceResolver {
 public:
  virtual ~CoreferenceResolver() = default;
  virtual std::vector<PronounReplacement> resolve(
      const std::vector<std::string>& sentences) = 0;
};

class SyntacticAnalyzer {
 public:
  virtual ~SyntacticAnalyzer() = default;
  virtual std::vector<AnswerCandidate> analyze(
      const std::vector<std::string>& sentences) = 0;
};

// ---------------------------------------------------------------------------
// Built-in heuristic models. Rule-based, deterministic, CPU-only; the default
// configuration for annotation and evaluation at desk scale. External model
// endpoints can be plugged in through the same interfaces (see http_adapters).
// ---------------------------------------------------------------------------

inline const std::unordered_set<std::string>& personal_pronouns() {
  static const std::unordered_set<std::string> kSet = {
      "he", "she", "they", "him", "her", "them"};
  return kSet;
}

inline const std::unordered_set<std::string>& possessive_pronouns() {
  static const std::unordered_set<std::string> kSet = {"his", "hers", "their",
                                                       "theirs"};
  return kSet;
}

/// True for a token that looks like a proper noun. Sentence-initial
/// capitalization only counts when the lowercase form is not a common word.
inline bool looks_proper(const std::string& token, bool sentence_initial) {
  if (!text::is_capitalized(token) || token.size() < 2) return false;
  if (!sentence_initial) return true;
  return !text::stopwords().count(text::lower(token));
}

/// Most-recent-mention pronoun resolver. Tracks the last proper noun seen and
/// maps personal/possessive pronouns onto it. "it" is left alone (frequently
/// pleonastic); unresolvable pronouns produce no replacement.
class RuleCoreferenceResolver : public CoreferenceResolver {
 public:
  std::vector<PronounReplacement> resolve(
      const std::vector<std::string>& sentences) override {
    std::vector<PronounReplacement> out;
    std::string last_proper;
    for (size_t si = 0; si < sentences.size(); ++si) {
      auto tokens = text::tokenize_spans(sentences[si]);
      bool initial = true;
      for (auto& t : tokens) {
        if (t.token.size() == 1 && text::is_ascii_punct(t.token[0])) continue;
        std::string low = text::lower(t.token);
        if (personal_pronouns().count(low)) {
          if (!last_proper.empty())
            out.push_back({static_cast<int>(si), t.begin, t.end, t.token,
                           last_proper});
        } else if (possessive_pronouns().count(low)) {
          if (!last_proper.empty())
            out.push_back({static_cast<int>(si), t.begin, t.end, t.token,
                           last_proper + "'s"});
        } else if (looks_proper(t.token, initial)) {
          last_proper = t.token;
        }
        initial = false;
      }
    }
    return out;
  }
};

inline const std::unordered_set<std::string>& determiners() {
  static const std::unordered_set<std::string> kSet = {
      "the", "a", "an", "this", "that", "these", "those",
      "my",  "our", "your", "his", "her", "their", "some", "every"};
  return kSet;
}

inline const std::unordered_set<std::string>& prepositions() {
  static const std::unordered_set<std::string> kSet = {
      "of", "in", "on", "at", "to", "with", "for", "from", "by",
      "into", "over", "under", "near", "after", "before", "during"};
  return kSet;
}

inline const std::unordered_set<std::string>& conjunctions() {
  static const std::unordered_set<std::string> kSet = {"and", "but", "or",
                                                       "so", "because", "while",
                                                       "when", "then"};
  return kSet;
}

inline const std::unordered_set<std::string>& irregular_verbs() {
  static const std::unordered_set<std::string> kSet = {
      "bought", "went",  "saw",   "ate",   "ran",   "took",  "made",
      "got",    "had",   "came",  "found", "built", "said",  "told",
      "gave",   "left",  "felt",  "met",   "sat",   "stood", "held",
      "kept",   "began", "drove", "wore",  "threw", "sang",  "swam",
      "flew",   "drew",  "put",   "read",  "let",   "set",   "won",
      "lost",   "spent", "slept", "woke",  "rode",  "chose", "fell",
      "broke",  "spoke", "knew",  "grew",  "brought", "caught", "taught",
      "thought"};
  return kSet;
}

inline const std::unordered_set<std::string>& copulas() {
  static const std::unordered_set<std::string> kSet = {
      "is", "are", "was", "were", "be", "been", "being", "am",
      "seems", "seemed", "looks", "looked"};
  return kSet;
}

inline bool looks_verb(const std::string& low) {
  if (irregular_verbs().count(low)) return true;
  if (copulas().count(low)) return false;
  if (text::stopwords().count(low)) return false;
  auto ends = [&](std::string_view suf) {
    return low.size() > suf.size() + 2 &&
           low.compare(low.size() - suf.size(), suf.size(), suf) == 0;
  };
  return ends("ed") || ends("ing");
}

/// Shallow chunker producing noun-phrase, named-entity, and verb-phrase
/// answer candidates with character spans. NP chunks start at a determiner
/// and run to the next verb/preposition/conjunction/punctuation boundary;
/// VP chunks are maximal (verb plus complements up to a boundary); NE chunks
/// are maximal runs of proper tokens.
class HeuristicSyntacticAnalyzer : public SyntacticAnalyzer {
 public:
  std::vector<AnswerCandidate> analyze(
      const std::vector<std::string>& sentences) override {
    std::vector<AnswerCandidate> out;
    std::unordered_set<std::string> seen;  // (normalized text, sentence)
    auto push = [&](const std::string& sent, int si, size_t b, size_t e,
                    SourceKind kind) {
      if (e <= b) return;
      std::string txt = text::trim(std::string_view(sent).substr(b, e - b));
      if (txt.size() < 2) return;
      auto content = text::content_words(txt);
      if (content.empty()) return;  // stopword-only chunk
      std::string key =
          text::normalize(txt) + "#" + std::to_string(si);
      if (!seen.insert(key).second) return;
      // recompute span against trimmed text
      size_t nb = sent.find(txt, b);
      if (nb == std::string::npos) nb = b;
      out.push_back({txt,
                     AnswerSpan{si, static_cast<int>(nb),
                                static_cast<int>(nb + txt.size())},
                     kind});
    };

    for (size_t si = 0; si < sentences.size(); ++si) {
      const std::string& sent = sentences[si];
      auto toks = text::tokenize_spans(sent);
      auto is_punct = [&](size_t i) {
        return toks[i].token.size() == 1 && text::is_ascii_punct(toks[i].token[0]);
      };
      auto boundary = [&](size_t i) {
        if (i >= toks.size() || is_punct(i)) return true;
        std::string low = text::lower(toks[i].token);
        return prepositions().count(low) || conjunctions().count(low) ||
               copulas().count(low) || looks_verb(low) ||
               personal_pronouns().count(low);
      };

      // Named entities: maximal runs of proper tokens.
      for (size_t i = 0; i < toks.size();) {
        if (!is_punct(i) && looks_proper(toks[i].token, i == 0)) {
          size_t j = i;
          while (j + 1 < toks.size() && !is_punct(j + 1) &&
                 looks_proper(toks[j + 1].token, false))
            ++j;
          push(sent, static_cast<int>(si), toks[i].begin, toks[j].end,
               SourceKind::named_entity);
          i = j + 1;
        } else {
          ++i;
        }
      }

      // Noun phrases: determiner-led chunks.
      for (size_t i = 0; i < toks.size(); ++i) {
        if (is_punct(i)) continue;
        if (!determiners().count(text::lower(toks[i].token))) continue;
        size_t j = i + 1;
        while (j < toks.size() && !boundary(j)) ++j;
        if (j > i + 1)
          push(sent, static_cast<int>(si), toks[i].begin, toks[j - 1].end,
               SourceKind::noun_phrase);
      }

      // Verb phrases: maximal verb-led chunks (verb plus complements).
      for (size_t i = 0; i < toks.size(); ++i) {
        if (is_punct(i)) continue;
        std::string low = text::lower(toks[i].token);
        if (!looks_verb(low)) continue;
        size_t j = i + 1;
        while (j < toks.size() && !is_punct(j) &&
               !prepositions().count(text::lower(toks[j].token)) &&
               !conjunctions().count(text::lower(toks[j].token)) &&
               !looks_verb(text::lower(toks[j].token)))
          ++j;
        push(sent, static_cast<int>(si), toks[i].begin, toks[j - 1].end,
             SourceKind::verb_phrase);
      }
    }
    return out;
  }
};

/// Cloze-style question generator: blanks the answer inside its sentence and
/// asks what completes the gap. The answer never appears in the question, and
/// the surrounding context makes the question answerable from the story.
class ClozeQuestionGenerator : public QuestionGenerator {
 public:
  std::optional<std::string> generate(const std::string& answer,
                                      const std::string& context) override {
    size_t pos = context.find(answer);
    if (pos == std::string::npos || answer.empty()) return std::nullopt;
    // Locate the containing sentence (naive terminator scan).
    size_t sb = 0;
    for (size_t i = 0; i < pos; ++i)
      if (context[i] == '.' || context[i] == '!' || context[i] == '?')
        sb = i + 1;
    size_t se = context.size();
    for (size_t i = pos + answer.size(); i < context.size(); ++i)
      if (context[i] == '.' || context[i] == '!' || context[i] == '?') {
        se = i + 1;
        break;
      }
    std::string left = text::trim(context.substr(sb, pos - sb));
    std::string right =
        text::trim(context.substr(pos + answer.size(),
                                  se - (pos + answer.size())));
    std::string cloze = left + " ___ " + right;
    return "What completes \"" + text::trim(cloze) + "\"?";
  }
};

/// Extractive QA over cloze questions: re-locates the left/right context of
/// the blank in the story and returns the gap text. Non-cloze questions are
/// answered UNANSWERABLE with zero confidence.
class OverlapQuestionAnswerer : public QuestionAnswerer {
 public:
  static constexpr const char* kUnanswerable = "UNANSWERABLE";

  QaResult answer(const std::string& question,
                  const std::string& context) override {
    auto cloze = extract_cloze(question);
    if (!cloze) return {kUnanswerable, 0.0};
    auto [left, right] = *cloze;
    // Exact left-anchor search first, right anchor must follow.
    if (!left.empty()) {
      size_t lp = context.find(left);
      while (lp != std::string::npos) {
        size_t gap_begin = lp + left.size();
        if (right.empty()) {
          // answer runs to end of sentence
          size_t gap_end = sentence_end(context, gap_begin);
          auto ans = text::trim(context.substr(gap_begin, gap_end - gap_begin));
          if (!ans.empty()) return {strip_terminal(ans), 1.0};
        } else {
          size_t rp = context.find(right, gap_begin);
          if (rp != std::string::npos && rp > gap_begin) {
            auto ans = text::trim(context.substr(gap_begin, rp - gap_begin));
            if (!ans.empty()) return {ans, 1.0};
          }
        }
        lp = context.find(left, lp + 1);
      }
    } else if (!right.empty()) {
      size_t rp = context.find(right);
      if (rp != std::string::npos) {
        size_t gap_begin = sentence_begin(context, rp);
        if (rp > gap_begin) {
          auto ans = text::trim(context.substr(gap_begin, rp - gap_begin));
          if (!ans.empty()) return {ans, 1.0};
        }
      }
    }
    return {kUnanswerable, 0.0};
  }

  /// Parses a ClozeQuestionGenerator question into (left, right) context.
  static std::optional<std::pair<std::string, std::string>> extract_cloze(
      const std::string& question) {
    const std::string prefix = "What completes \"";
    if (question.rfind(prefix, 0) != 0) return std::nullopt;
    size_t qend = question.rfind('"');
    if (qend == std::string::npos || qend <= prefix.size()) return std::nullopt;
    std::string body = question.substr(prefix.size(), qend - prefix.size());
    size_t blank = body.find("___");
    if (blank == std::string::npos) return std::nullopt;
    return std::make_pair(text::trim(body.substr(0, blank)),
                          text::trim(body.substr(blank + 3)));
  }

 private:
  static size_t sentence_end(const std::string& s, size_t from) {
    for (size_t i = from; i < s.size(); ++i)
      if (s[i] == '.' || s[i] == '!' || s[i] == '?') return i + 1;
    return s.size();
  }
  static size_t sentence_begin(const std::string& s, size_t before) {
    size_t b = 0;
    for (size_t i = 0; i < before; ++i)
      if (s[i] == '.' || s[i] == '!' || s[i] == '?') b = i + 1;
    while (b < before && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    return b;
  }
  static std::string strip_terminal(std::string s) {
    while (!s.empty() && (s.back() == '.' || s.back() == '!' || s.back() == '?'))
      s.pop_back();
    return text::trim(s);
  }
};

// ---------------------------------------------------------------------------
// Test stubs
// ---------------------------------------------------------------------------

/// Answers every question with a fixed string (e.g. "" or UNANSWERABLE).
class FixedAnswerStub : public QuestionAnswerer {
 public:
  explicit FixedAnswerStub(std::string answer, double confidence = 1.0)
      : answer_(std::move(answer)), confidence_(confidence) {}
  QaResult answer(const std::string&, const std::string&) override {
    return {answer_, confidence_};
  }

 private:
  std::string answer_;
  double confidence_;
};

/// Verbatim oracle: looks the question up in a question→answer table
/// (typically built from a blueprint) and returns the stored answer.
class OracleStubAnswerer : public QuestionAnswerer {
 public:
  explicit OracleStubAnswerer(std::map<std::string, std::string> table)
      : table_(std::move(table)) {}

  static OracleStubAnswerer from_blueprint(const Blueprint& bp) {
    std::map<std::string, std::string> table;
    for (auto& p : bp.flattened()) table[p.question] = p.answer;
    return OracleStubAnswerer(std::move(table));
  }

  QaResult answer(const std::string& question, const std::string&) override {
    auto it = table_.find(question);
    if (it == table_.end()) return {OverlapQuestionAnswerer::kUnanswerable, 0.0};
    return {it->second, 1.0};
  }

 private:
  std::map<std::string, std::string> table_;
};

// ---------------------------------------------------------------------------
// Adapter bundle + configuration
// ---------------------------------------------------------------------------

enum class MatchRule { exact, token_f1 };

struct MatchConfig {
  MatchRule rule = MatchRule::exact;
  /// Used when rule == token_f1, and as the fallback threshold when the
  /// exact rule is configured with fallback enabled.
  double tau = 0.8;
  bool exact_with_f1_fallback = true;
};

/// True when a QA model's answer counts as recovering the original.
inline bool answers_match(const std::string& predicted,
                          const std::string& original,
                          const MatchConfig& cfg) {
  std::string np = text::normalize_answer(predicted);
  std::string no = text::normalize_answer(original);
  switch (cfg.rule) {
    case MatchRule::exact:
      if (np == no) return true;
      if (cfg.exact_with_f1_fallback)
        return text::token_f1(predicted, original) >= cfg.tau;
      return false;
    case MatchRule::token_f1:
      return text::token_f1(predicted, original) >= cfg.tau;
  }
  return false;
}

struct AdapterBundle {
  std::shared_ptr<QuestionGenerator> question_generator;
  std::shared_ptr<QuestionAnswerer> question_answerer;
  std::shared_ptr<CoreferenceResolver> coreference_resolver;
  std::shared_ptr<SyntacticAnalyzer> syntactic_analyzer;
  MatchConfig match;
  /// Fall back to raw sentences when the resolver fails.
  bool coref_fallback_to_original = true;
  /// Cap on answer candidates per story (0 = unlimited).
  size_t max_candidates_per_story = 0;

  static AdapterBundle heuristic() {
    AdapterBundle b;
    b.question_generator = std::make_shared<ClozeQuestionGenerator>();
    b.question_answerer = std::make_shared<OverlapQuestionAnswerer>();
    b.coreference_resolver = std::make_shared<RuleCoreferenceResolver>();
    b.syntactic_analyzer = std::make_shared<HeuristicSyntacticAnalyzer>();
    return b;
  }
};

}  // namespace storyplan
