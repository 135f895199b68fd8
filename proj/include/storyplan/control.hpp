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

#include <string>
#include <unordered_set>
#include <vector>

#include "storyplan/corpus.hpp"
#include "storyplan/metrics.hpp"
#include "storyplan/story_models.hpp"
#include "storyplan/text.hpp"
#include "storyplan/visual_prefix.hpp"

namespace storyplan::control {

// ---------------------------------------------------------------------------
// Blueprint refinement against the detected concept set
// ---------------------------------------------------------------------------

struct RefinementConfig {
  /// strict: every content lemma of the answer must be grounded.
  /// Default: only the head-noun lemma must be.
  bool strict_full_phrase = false;
};

struct RemovedPair {
  QAPair pair;
  std::string offending_entity;
};

struct RefinementReport {
  std::vector<RemovedPair> removed_pairs;
  Blueprint kept;
};

/// Head entity of an answer phrase: the lemma of its last content word.
inline std::string head_noun_lemma(const std::string& answer) {
  auto words = text::content_words(answer);
  if (words.empty()) return "";
  return text::lemma(words.back());
}

/// Removes every QA pair whose answer names an entity outside the concept
/// lexicon. Survivors keep their order and segment; idempotent.
inline RefinementReport refine_blueprint(const Blueprint& blueprint,
                                         const ConceptSet& concepts,
                                         const RefinementConfig& cfg = {}) {
  if (concepts.flattened().empty())
    throw DomainError("refine_blueprint: empty concept set");
  auto lexicon = metrics::concept_lexicon(concepts);
  RefinementReport report;
  report.kept.segments.resize(blueprint.segment_count());
  for (size_t si = 0; si < blueprint.segments.size(); ++si) {
    for (auto& p : blueprint.segments[si].pairs) {
      std::string offending;
      if (cfg.strict_full_phrase) {
        for (auto& w : text::content_words(p.answer)) {
          if (!lexicon.count(text::lemma(w))) {
            offending = text::lemma(w);
            break;
          }
        }
      } else {
        std::string head = head_noun_lemma(p.answer);
        if (!head.empty() && !lexicon.count(head)) offending = head;
      }
      if (offending.empty()) {
        report.kept.segments[si].pairs.push_back(p);
      } else {
        report.removed_pairs.push_back({p, offending});
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Refined generation
// ---------------------------------------------------------------------------

struct RefinedGeneration {
  GenerationTrace trace;
  RefinementReport report;
};

/// Top-down: decode the plan, refine it, then re-prompt story decoding from
/// the refined "Plan: ... Story:" text. Iterative: refine each step's plan
/// before it enters the context. An entirely emptied blueprint falls back to
/// unrefined generation with a warning flag.
inline RefinedGeneration generate_refined(const ImageSequence& images,
                                          ModelHandle& h,
                                          const DecodeConfig& cfg,
                                          const RefinementConfig& rcfg = {}) {
  RefinedGeneration out;
  auto pd = h.prepare_prefix(images);
  if (pd.concepts.flattened().empty())
    throw DomainError("generate_refined: concept detection disabled");

  if (h.mode == PlanMode::top_down) {
    GenerationTrace first = generate_topdown(images, h, cfg);
    out.report = refine_blueprint(first.blueprint, pd.concepts, rcfg);
    if (out.report.removed_pairs.empty()) {
      out.trace = std::move(first);  // fully grounded plan: nothing to redo
      return out;
    }
    if (out.report.kept.pair_count() == 0) {
      out.trace = std::move(first);
      out.trace.flags.push_back("refinement_emptied_blueprint");
      return out;
    }
    // re-prompt story decoding conditioned on the refined plan text
    std::string forced_text = serialization::squeeze_spaces(
        std::string(markers::kPlan) + " " +
        serialization::serialize_plan(out.report.kept) + " " + markers::kStory);
    std::vector<int> forced = h.tokenizer.encode(forced_text);
    nn::Mat enc_out = h.model.encode_plain(h.prefix_plain(pd));
    auto tokens = beam_search(h.model, enc_out, Tokenizer::kBos,
                              Tokenizer::kEos, cfg.beam_size,
                              cfg.max_output_tokens, forced);
    out.trace.raw_text = h.tokenizer.decode(tokens);
    try {
      auto parsed = parse_topdown(out.trace.raw_text);
      out.trace.blueprint = std::move(parsed.blueprint);
      out.trace.story = std::move(parsed.story);
    } catch (const ParseError&) {
      out.trace.flags.push_back("truncated");
      out.trace.blueprint = out.report.kept;
    }
    return out;
  }

  // Iterative mode: per-step refinement before the step enters the context.
  nn::Mat enc_out = h.model.encode_plain(h.prefix_plain(pd));
  auto lexicon = metrics::concept_lexicon(pd.concepts);
  std::vector<std::string> emitted;
  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    std::string context =
        iter == 0 ? std::string(markers::kStart)
                  : serialization::squeeze_spaces(
                        std::string(markers::kContext) + " " +
                        text::join(emitted, " "));
    std::vector<int> forced = h.tokenizer.encode(context);
    auto decode_once = [&](int beams) {
      auto tokens = beam_search(h.model, enc_out, Tokenizer::kBos,
                                Tokenizer::kEos, beams, cfg.max_output_tokens,
                                forced);
      std::vector<int> ids(tokens.begin() + 1 + forced.size(), tokens.end());
      return h.tokenizer.decode(ids);
    };
    std::string step_text = decode_once(cfg.beam_size);
    auto parsed = parse_iterative_step(step_text);
    if (!parsed.ok) {
      step_text = decode_once(1);
      parsed = parse_iterative_step(step_text);
      if (!parsed.ok) {
        out.trace.flags.push_back("truncated");
        break;
      }
    }
    if (parsed.is_end) break;
    Blueprint one;
    one.segments.push_back(parsed.segment);
    auto step_report = refine_blueprint(one, pd.concepts, rcfg);
    for (auto& r : step_report.removed_pairs)
      out.report.removed_pairs.push_back(r);
    SentenceBlueprint refined_seg = step_report.kept.segments[0];
    std::string plan_text = serialization::serialize_segment(refined_seg);
    out.trace.steps.push_back({context, plan_text, parsed.sentence});
    out.trace.blueprint.segments.push_back(refined_seg);
    out.trace.story.sentences.push_back(parsed.sentence);
    if (!out.trace.raw_text.empty()) out.trace.raw_text += " ";
    out.trace.raw_text += step_text;
    emitted.push_back(serialization::squeeze_spaces(
        std::string(markers::kPlan) + " " + plan_text + " " +
        markers::kNextSentence + " " + parsed.sentence));
  }
  out.report.kept = out.trace.blueprint;
  return out;
}

/// Length control: generate_iterative with the iteration cap raised.
inline GenerationTrace generate_extended(const ImageSequence& images,
                                         ModelHandle& h, DecodeConfig cfg,
                                         int max_iterations) {
  if (h.mode != PlanMode::iterative)
    throw ConfigError("generate_extended: iterative model required");
  cfg.max_iterations = max_iterations;
  return generate_iterative(images, h, cfg);
}

}  // namespace storyplan::control
