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
#include <future>
#include <string>
#include <thread>
#include <vector>

#include "storyplan/adapters.hpp"
#include "storyplan/corpus.hpp"
#include "storyplan/errors.hpp"

namespace storyplan {

// ---------------------------------------------------------------------------
// Blueprint annotation pipeline: decontextualize → extract candidates →
// generate questions → redundancy filter → round-trip filter → align.
// ---------------------------------------------------------------------------

/// Replaces pronouns with their head mentions; only pronoun tokens change.
inline Story decontextualize(const Story& story, CoreferenceResolver& resolver,
                             bool fallback_to_original = true) {
  for (auto& s : story.sentences)
    if (text::trim(s).empty())
      throw AnnotationError("decontextualize", "empty sentence in story");
  Story out = story;
  std::vector<PronounReplacement> repls;
  try {
    repls = resolver.resolve(story.sentences);
  } catch (const std::exception& e) {
    if (fallback_to_original) {
      out.decontextualized_sentences = story.sentences;
      return out;
    }
    throw AnnotationError("decontextualize", e.what());
  }
  std::vector<std::string> dec = story.sentences;
  // Apply right-to-left per sentence so earlier offsets stay valid.
  std::stable_sort(repls.begin(), repls.end(), [](auto& a, auto& b) {
    if (a.sentence_index != b.sentence_index)
      return a.sentence_index < b.sentence_index;
    return a.char_begin > b.char_begin;
  });
  for (auto& r : repls) {
    if (r.sentence_index < 0 ||
        r.sentence_index >= static_cast<int>(dec.size()))
      continue;
    std::string& sent = dec[r.sentence_index];
    if (r.char_end > sent.size() || r.char_begin >= r.char_end) continue;
    sent.replace(r.char_begin, r.char_end - r.char_begin, r.replacement);
  }
  out.decontextualized_sentences = std::move(dec);
  return out;
}

/// All three candidate kinds attempted; spans validated; de-duplicated on
/// (normalized text, sentence index) by the analyzer contract.
inline std::vector<AnswerCandidate> extract_answer_candidates(
    const Story& story, SyntacticAnalyzer& analyzer,
    size_t max_candidates = 0) {
  if (!story.decontextualized_sentences)
    throw AnnotationError("extract_answer_candidates",
                          "decontextualized sentences missing");
  std::vector<AnswerCandidate> cands;
  try {
    cands = analyzer.analyze(*story.decontextualized_sentences);
  } catch (const std::exception& e) {
    throw AnnotationError("extract_answer_candidates", e.what());
  }
  const auto& sents = *story.decontextualized_sentences;
  std::vector<AnswerCandidate> valid;
  for (auto& c : cands) {
    if (c.span.sentence_index < 0 ||
        c.span.sentence_index >= static_cast<int>(sents.size()))
      continue;
    const std::string& sent = sents[c.span.sentence_index];
    if (c.span.char_start < 0 || c.span.char_end > static_cast<int>(sent.size()))
      continue;
    if (sent.substr(c.span.char_start, c.span.char_end - c.span.char_start) !=
        c.text)
      continue;
    valid.push_back(c);
    if (max_candidates > 0 && valid.size() >= max_candidates) break;
  }
  return valid;
}

struct QgFailure {
  AnswerCandidate candidate;
  std::string reason;
};

/// One pair per candidate, order preserved; failures skipped and reported.
inline std::vector<QAPair> generate_questions(
    const std::vector<AnswerCandidate>& candidates, const Story& story,
    QuestionGenerator& qg, std::vector<QgFailure>* failures = nullptr) {
  std::string context = story.effective_joined();
  std::vector<QAPair> pairs;
  for (auto& c : candidates) {
    std::optional<std::string> q;
    try {
      q = qg.generate(c.text, context);
    } catch (const std::exception& e) {
      if (failures) failures->push_back({c, e.what()});
      continue;
    }
    if (!q || text::trim(*q).empty()) {
      if (failures) failures->push_back({c, "no question produced"});
      continue;
    }
    std::string question = text::trim(*q);
    if (question.back() != '?') question += '?';
    pairs.push_back({c.text, question, c.span, c.kind});
  }
  return pairs;
}

/// Drops pairs whose normalized answer is a substring of the normalized
/// question. Only removes; never edits or reorders; idempotent.
inline std::vector<QAPair> filter_redundant(const std::vector<QAPair>& pairs) {
  std::vector<QAPair> out;
  for (auto& p : pairs) {
    std::string na = text::normalize_answer(p.answer);
    std::string nq = text::normalize_answer(p.question);
    if (!na.empty() && text::contains_substring(nq, na)) continue;
    out.push_back(p);
  }
  return out;
}

/// Round-trip consistency: keep a pair iff the QA model, reading the story,
/// recovers the answer that seeded the question.
inline std::vector<QAPair> round_trip_filter(const std::vector<QAPair>& pairs,
                                             const Story& story,
                                             QuestionAnswerer& qa,
                                             const MatchConfig& match = {}) {
  if (!story.decontextualized_sentences)
    throw AnnotationError("round_trip_filter",
                          "decontextualized sentences missing");
  std::string context = story.effective_joined();
  std::vector<QAPair> out;
  for (auto& p : pairs) {
    QaResult r;
    try {
      r = qa.answer(p.question, context);
    } catch (const std::exception&) {
      continue;  // dropped and logged by callers
    }
    if (answers_match(r.answer, p.answer, match)) out.push_back(p);
  }
  return out;
}

/// Buckets pairs into per-sentence segments by answer span; within a segment
/// pairs sort by answer start offset. Empty segments allowed.
inline Blueprint align_to_sentences(const std::vector<QAPair>& pairs,
                                    const Story& story) {
  Blueprint bp;
  bp.segments.resize(story.sentences.size());
  std::vector<QAPair> sorted = pairs;
  std::stable_sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) {
    return a.answer_span->char_start < b.answer_span->char_start;
  });
  for (auto& p : pairs)
    if (!p.answer_span)
      throw AnnotationError("align_to_sentences",
                            "pair missing answer_span: " + p.answer);
  for (auto& p : sorted) {
    int si = p.answer_span->sentence_index;
    if (si < 0 || si >= static_cast<int>(bp.segments.size()))
      throw AnnotationError("align_to_sentences",
                            "span sentence_index out of range");
    bp.segments[si].pairs.push_back(p);
  }
  return bp;
}

/// Full per-sample pipeline; deterministic for fixed adapters.
inline StorySample annotate_sample(const StorySample& sample,
                                   const AdapterBundle& adapters) {
  StorySample out = sample;
  out.story = decontextualize(sample.story, *adapters.coreference_resolver,
                              adapters.coref_fallback_to_original);
  auto candidates =
      extract_answer_candidates(out.story, *adapters.syntactic_analyzer,
                                adapters.max_candidates_per_story);
  auto pairs = generate_questions(candidates, out.story,
                                  *adapters.question_generator);
  pairs = filter_redundant(pairs);
  pairs = round_trip_filter(pairs, out.story, *adapters.question_answerer,
                            adapters.match);
  out.blueprint = align_to_sentences(pairs, out.story);
  return out;
}

struct AnnotationFailure {
  size_t index = 0;
  std::string sequence_id;
  std::string error;
};

struct AnnotationResult {
  std::vector<StorySample> samples;  // input order, annotated where possible
  std::vector<AnnotationFailure> failures;
};

/// Fans annotation out across workers; output order and content are
/// independent of the worker count. Failures never abort the batch.
inline AnnotationResult annotate_corpus(const std::vector<StorySample>& in,
                                        const AdapterBundle& adapters,
                                        unsigned parallelism = 1) {
  AnnotationResult result;
  result.samples.resize(in.size());
  std::vector<std::optional<AnnotationFailure>> fails(in.size());
  if (parallelism == 0) parallelism = 1;

  auto work = [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      try {
        result.samples[i] = annotate_sample(in[i], adapters);
      } catch (const std::exception& e) {
        result.samples[i] = in[i];
        fails[i] = AnnotationFailure{i, in[i].image_sequence.sequence_id,
                                     e.what()};
      }
    }
  };

  if (parallelism == 1 || in.size() <= 1) {
    work(0, in.size());
  } else {
    size_t n = in.size();
    size_t chunk = (n + parallelism - 1) / parallelism;
    std::vector<std::thread> threads;
    for (size_t b = 0; b < n; b += chunk)
      threads.emplace_back(work, b, std::min(n, b + chunk));
    for (auto& t : threads) t.join();
  }
  for (auto& f : fails)
    if (f) result.failures.push_back(*f);
  return result;
}

}  // namespace storyplan
