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

#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "storyplan/errors.hpp"
#include "storyplan/text.hpp"

namespace storyplan {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct ImageRef {
  std::string id;
  std::string uri;
  std::optional<int> width;
  std::optional<int> height;
};

struct ImageSequence {
  std::string sequence_id;
  std::vector<ImageRef> images;  // order is meaningful

  size_t size() const { return images.size(); }
};

struct Story {
  std::vector<std::string> sentences;
  std::optional<std::vector<std::string>> decontextualized_sentences;

  size_t size() const { return sentences.size(); }

  /// The decontextualized text when present, the raw sentences otherwise.
  const std::vector<std::string>& effective_sentences() const {
    return decontextualized_sentences ? *decontextualized_sentences
                                      : sentences;
  }

  std::string joined() const { return text::join(sentences, " "); }
  std::string effective_joined() const {
    return text::join(effective_sentences(), " ");
  }
};

enum class SourceKind { noun_phrase, named_entity, verb_phrase, generated };

inline std::string to_string(SourceKind k) {
  switch (k) {
    case SourceKind::noun_phrase: return "noun_phrase";
    case SourceKind::named_entity: return "named_entity";
    case SourceKind::verb_phrase: return "verb_phrase";
    case SourceKind::generated: return "generated";
  }
  return "generated";
}

inline SourceKind source_kind_from_string(const std::string& s) {
  if (s == "noun_phrase") return SourceKind::noun_phrase;
  if (s == "named_entity") return SourceKind::named_entity;
  if (s == "verb_phrase") return SourceKind::verb_phrase;
  if (s == "generated") return SourceKind::generated;
  throw ValidationError("unknown source_kind: " + s);
}

struct AnswerSpan {
  int sentence_index = 0;
  int char_start = 0;
  int char_end = 0;

  bool operator==(const AnswerSpan&) const = default;
};

struct QAPair {
  std::string answer;
  std::string question;
  std::optional<AnswerSpan> answer_span;  // absent for model-generated plans
  SourceKind source_kind = SourceKind::generated;

  bool operator==(const QAPair&) const = default;
};

struct SentenceBlueprint {
  std::vector<QAPair> pairs;

  size_t size() const { return pairs.size(); }
  bool operator==(const SentenceBlueprint&) const = default;
};

struct Blueprint {
  std::vector<SentenceBlueprint> segments;  // one per story sentence

  size_t segment_count() const { return segments.size(); }

  size_t pair_count() const {
    size_t n = 0;
    for (auto& s : segments) n += s.pairs.size();
    return n;
  }

  /// Global QA order: concatenation of per-sentence segments.
  std::vector<QAPair> flattened() const {
    std::vector<QAPair> out;
    for (auto& s : segments)
      out.insert(out.end(), s.pairs.begin(), s.pairs.end());
    return out;
  }

  bool operator==(const Blueprint&) const = default;
};

enum class Split { train, validation, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "train";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation" || s == "val" || s == "dev") return Split::validation;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split: " + s);
}

struct StorySample {
  ImageSequence image_sequence;
  Story story;
  std::optional<Blueprint> blueprint;
  Split split = Split::train;
};

struct CorpusStats {
  double avg_images_per_sequence = 0;
  double avg_sentences_per_story = 0;
  double avg_tokens_per_story = 0;
  std::optional<double> avg_qa_pairs_per_story;
  std::optional<double> avg_tokens_per_qa_pair;
  std::optional<double> avg_tokens_story_plus_qa;
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Checks every type invariant; violations are data, not exceptions.
inline std::vector<std::string> validate_sample(const StorySample& sample) {
  std::vector<std::string> v;
  if (sample.image_sequence.sequence_id.empty())
    v.push_back("sequence_id: empty");
  if (sample.image_sequence.images.empty())
    v.push_back("images: sequence must contain at least one image");
  for (size_t i = 0; i < sample.image_sequence.images.size(); ++i) {
    const auto& img = sample.image_sequence.images[i];
    if (img.id.empty())
      v.push_back("images[" + std::to_string(i) + "].id: empty");
    if (img.uri.empty())
      v.push_back("images[" + std::to_string(i) + "].uri: empty");
  }
  if (sample.story.sentences.empty()) v.push_back("sentences: empty story");
  for (size_t i = 0; i < sample.story.sentences.size(); ++i) {
    if (text::trim(sample.story.sentences[i]).empty())
      v.push_back("sentences[" + std::to_string(i) +
                  "]: empty after whitespace trim");
  }
  if (sample.story.sentences.size() != sample.image_sequence.images.size())
    v.push_back("sentences: count " +
                std::to_string(sample.story.sentences.size()) +
                " does not match image count " +
                std::to_string(sample.image_sequence.images.size()));
  if (sample.story.decontextualized_sentences &&
      sample.story.decontextualized_sentences->size() !=
          sample.story.sentences.size())
    v.push_back("decontextualized_sentences: count mismatch with sentences");
  if (sample.blueprint) {
    const auto& bp = *sample.blueprint;
    if (bp.segment_count() != sample.story.sentences.size())
      v.push_back("blueprint: segment count " +
                  std::to_string(bp.segment_count()) +
                  " does not match sentence count " +
                  std::to_string(sample.story.sentences.size()));
    const auto& ctx = sample.story.effective_sentences();
    for (size_t si = 0; si < bp.segments.size(); ++si) {
      for (size_t pi = 0; pi < bp.segments[si].pairs.size(); ++pi) {
        const auto& p = bp.segments[si].pairs[pi];
        std::string at = "blueprint[" + std::to_string(si) + "][" +
                         std::to_string(pi) + "]";
        if (text::trim(p.answer).empty()) v.push_back(at + ".answer: empty");
        if (text::trim(p.question).empty())
          v.push_back(at + ".question: empty");
        if (p.answer_span) {
          const auto& sp = *p.answer_span;
          if (sp.sentence_index < 0 ||
              sp.sentence_index >= static_cast<int>(ctx.size())) {
            v.push_back(at + ".answer_span: sentence_index out of range");
          } else {
            const std::string& sent = ctx[sp.sentence_index];
            if (sp.char_start < 0 || sp.char_end > static_cast<int>(sent.size()) ||
                sp.char_start >= sp.char_end) {
              v.push_back(at + ".answer_span: character range out of bounds");
            } else if (sent.substr(sp.char_start, sp.char_end - sp.char_start) !=
                       p.answer) {
              v.push_back(at + ".answer_span: span text does not equal answer");
            }
          }
        }
      }
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// JSONL (de)serialization
// ---------------------------------------------------------------------------

inline json to_json(const StorySample& s) {
  json j;
  j["sequence_id"] = s.image_sequence.sequence_id;
  json imgs = json::array();
  for (auto& img : s.image_sequence.images) {
    json ji{{"id", img.id}, {"uri", img.uri}};
    if (img.width) ji["width"] = *img.width;
    if (img.height) ji["height"] = *img.height;
    imgs.push_back(std::move(ji));
  }
  j["images"] = std::move(imgs);
  j["sentences"] = s.story.sentences;
  if (s.story.decontextualized_sentences)
    j["decontextualized_sentences"] = *s.story.decontextualized_sentences;
  if (s.blueprint) {
    json segs = json::array();
    for (auto& seg : s.blueprint->segments) {
      json jseg = json::array();
      for (auto& p : seg.pairs) {
        json jp{{"answer", p.answer},
                {"question", p.question},
                {"source_kind", to_string(p.source_kind)}};
        if (p.answer_span)
          jp["answer_span"] = {p.answer_span->sentence_index,
                               p.answer_span->char_start,
                               p.answer_span->char_end};
        jseg.push_back(std::move(jp));
      }
      segs.push_back(std::move(jseg));
    }
    j["blueprint"] = std::move(segs);
  }
  j["split"] = to_string(s.split);
  return j;
}

inline StorySample sample_from_json(const json& j) {
  StorySample s;
  auto require = [&](const char* key) -> const json& {
    if (!j.contains(key))
      throw ValidationError(std::string("missing required field: ") + key);
    return j.at(key);
  };
  s.image_sequence.sequence_id = require("sequence_id").get<std::string>();
  for (const auto& ji : require("images")) {
    ImageRef img;
    img.id = ji.at("id").get<std::string>();
    img.uri = ji.at("uri").get<std::string>();
    if (ji.contains("width")) img.width = ji.at("width").get<int>();
    if (ji.contains("height")) img.height = ji.at("height").get<int>();
    s.image_sequence.images.push_back(std::move(img));
  }
  s.story.sentences = require("sentences").get<std::vector<std::string>>();
  if (j.contains("decontextualized_sentences"))
    s.story.decontextualized_sentences =
        j.at("decontextualized_sentences").get<std::vector<std::string>>();
  if (j.contains("blueprint")) {
    Blueprint bp;
    for (const auto& jseg : j.at("blueprint")) {
      SentenceBlueprint seg;
      for (const auto& jp : jseg) {
        QAPair p;
        p.answer = jp.at("answer").get<std::string>();
        p.question = jp.at("question").get<std::string>();
        p.source_kind =
            source_kind_from_string(jp.at("source_kind").get<std::string>());
        if (jp.contains("answer_span")) {
          auto arr = jp.at("answer_span");
          if (!arr.is_array() || arr.size() != 3)
            throw ValidationError("answer_span: expected [int,int,int]");
          p.answer_span = AnswerSpan{arr[0].get<int>(), arr[1].get<int>(),
                                     arr[2].get<int>()};
        }
        seg.pairs.push_back(std::move(p));
      }
      bp.segments.push_back(std::move(seg));
    }
    s.blueprint = std::move(bp);
  }
  s.split = split_from_string(require("split").get<std::string>());
  return s;
}

struct LoadOptions {
  /// Filter to one split; nullopt loads everything.
  std::optional<Split> split;
  /// When true, records failing validation are reported via on_error and
  /// skipped instead of aborting the load.
  bool skip_invalid = false;
  std::function<void(size_t line, const std::string& error)> on_error;
};

inline std::vector<StorySample> load_corpus(const std::string& path,
                                            const LoadOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file: " + path);
  std::vector<StorySample> samples;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    StorySample s;
    try {
      json j = json::parse(line);
      s = sample_from_json(j);
      auto violations = validate_sample(s);
      if (!violations.empty())
        throw ValidationError(text::join(violations, "; "));
    } catch (const std::exception& e) {
      std::string msg = "line " + std::to_string(lineno) + ": " + e.what();
      if (opts.skip_invalid) {
        if (opts.on_error) opts.on_error(lineno, e.what());
        continue;
      }
      if (dynamic_cast<const ValidationError*>(&e))
        throw ValidationError(msg);
      throw ParseError(msg);
    }
    if (opts.split && s.split != *opts.split) continue;
    samples.push_back(std::move(s));
  }
  return samples;
}

inline std::vector<StorySample> load_corpus(const std::string& path,
                                            Split split) {
  LoadOptions opts;
  opts.split = split;
  return load_corpus(path, opts);
}

inline void save_corpus(const std::vector<StorySample>& samples,
                        const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open path for writing: " + path);
  for (auto& s : samples) out << to_json(s).dump() << '\n';
  if (!out) throw IoError("write failure: " + path);
}

// ---------------------------------------------------------------------------
// Corpus statistics
// ---------------------------------------------------------------------------

using TokenCounter = std::function<size_t(const std::string&)>;

/// Default token counting: whitespace-plus-punctuation tokens.
inline size_t default_token_count(const std::string& s) {
  return text::tokenize(s).size();
}

inline CorpusStats compute_stats(const std::vector<StorySample>& samples,
                                 const TokenCounter& count_tokens =
                                     default_token_count) {
  if (samples.empty())
    throw DomainError("compute_stats: empty sample list");
  CorpusStats st;
  double images = 0, sentences = 0, story_tokens = 0;
  double qa_pairs = 0, qa_tokens = 0;
  size_t with_blueprint = 0;
  for (auto& s : samples) {
    images += static_cast<double>(s.image_sequence.size());
    sentences += static_cast<double>(s.story.size());
    size_t st_tok = 0;
    for (auto& sent : s.story.sentences) st_tok += count_tokens(sent);
    story_tokens += static_cast<double>(st_tok);
    if (s.blueprint) {
      ++with_blueprint;
      size_t pairs = 0, ptok = 0;
      for (auto& seg : s.blueprint->segments)
        for (auto& p : seg.pairs) {
          ++pairs;
          ptok += count_tokens(p.answer) + count_tokens(p.question);
        }
      qa_pairs += static_cast<double>(pairs);
      qa_tokens += static_cast<double>(ptok);
    }
  }
  double n = static_cast<double>(samples.size());
  st.avg_images_per_sequence = images / n;
  st.avg_sentences_per_story = sentences / n;
  st.avg_tokens_per_story = story_tokens / n;
  if (with_blueprint > 0) {
    double nb = static_cast<double>(with_blueprint);
    st.avg_qa_pairs_per_story = qa_pairs / nb;
    st.avg_tokens_per_qa_pair = qa_pairs > 0 ? qa_tokens / qa_pairs : 0.0;
    // Story + QA token total, averaged over blueprint-bearing samples.
    double bp_story_tokens = 0;
    for (auto& s : samples) {
      if (!s.blueprint) continue;
      for (auto& sent : s.story.sentences)
        bp_story_tokens += static_cast<double>(count_tokens(sent));
    }
    st.avg_tokens_story_plus_qa = (bp_story_tokens + qa_tokens) / nb;
  }
  return st;
}

}  // namespace storyplan
