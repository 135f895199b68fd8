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
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "storyplan/adapters.hpp"
#include "storyplan/corpus.hpp"
#include "storyplan/errors.hpp"
#include "storyplan/model.hpp"
#include "storyplan/tokenizer.hpp"
#include "storyplan/visual_prefix.hpp"

namespace storyplan {

// ---------------------------------------------------------------------------
// Target-string serialization
//
// Grammar (plan side):
//   plan      := segment ("||" segment)*      one segment per story sentence
//   segment   := pair ("|" pair)* | ε
//   pair      := answer "?" question "?"      the first "?" is the delimiter;
//                                             answers and question bodies are
//                                             sanitized to contain no "?"
// Top-down targets: "Plan: <plan> Story: <s_1> ... <s_k>".
// Iterative step targets: "Plan: <segment> Next Sentence: <s_i>", final step
// "⟨END⟩"; contexts are "⟨START⟩" or "Context: " + prior targets.
// ---------------------------------------------------------------------------

namespace serialization {

inline std::string sanitize(std::string s) {
  // '|' and '?' are grammar delimiters and may not appear inside fields
  std::string out;
  for (char c : s) {
    if (c == '|') c = '/';
    if (c == '?') continue;
    out += c;
  }
  return text::trim(out);
}

inline std::string serialize_pair(const QAPair& p) {
  std::string a = sanitize(p.answer);
  std::string q = sanitize(p.question);
  return a + " ? " + q + "?";
}

inline std::string serialize_segment(const SentenceBlueprint& seg) {
  std::vector<std::string> parts;
  for (auto& p : seg.pairs) parts.push_back(serialize_pair(p));
  return text::join(parts, " | ");
}

inline std::string serialize_plan(const Blueprint& bp) {
  std::vector<std::string> segs;
  for (auto& s : bp.segments) segs.push_back(serialize_segment(s));
  return text::join(segs, " || ");
}

inline std::string squeeze_spaces(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == ' ' && !out.empty() && out.back() == ' ') continue;
    out += c;
  }
  return text::trim(out);
}

/// The first "?" ends the answer; the question runs to the end of the pair
/// (its own terminal "?" included). Robust to detokenized spacing ("a? q?").
inline std::optional<QAPair> parse_pair(const std::string& raw) {
  std::string s = text::trim(raw);
  size_t sep = s.find('?');
  if (sep == std::string::npos) return std::nullopt;
  QAPair p;
  p.answer = text::trim(s.substr(0, sep));
  p.question = text::trim(s.substr(sep + 1));
  p.source_kind = SourceKind::generated;
  if (p.answer.empty() || p.question.empty()) return std::nullopt;
  if (p.question.back() != '?') p.question += '?';
  return p;
}

inline SentenceBlueprint parse_segment(const std::string& raw,
                                       std::vector<std::string>* issues =
                                           nullptr) {
  SentenceBlueprint seg;
  if (text::trim(raw).empty()) return seg;
  for (auto& part : text::split(raw, "|")) {
    if (text::trim(part).empty()) continue;
    auto p = parse_pair(part);
    if (p) {
      seg.pairs.push_back(std::move(*p));
    } else if (issues) {
      issues->push_back("unparseable pair: " + text::trim(part));
    }
  }
  return seg;
}

inline Blueprint parse_plan(const std::string& raw,
                            std::vector<std::string>* issues = nullptr) {
  Blueprint bp;
  for (auto& segtext : text::split(raw, "||"))
    bp.segments.push_back(parse_segment(segtext, issues));
  return bp;
}

/// Splits running story text into sentences at terminator boundaries,
/// keeping the terminator with its sentence.
inline std::vector<std::string> split_sentences(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (size_t i = 0; i < s.size(); ++i) {
    cur += s[i];
    if (s[i] == '.' || s[i] == '!' || s[i] == '?') {
      // consume any immediately repeated terminators
      while (i + 1 < s.size() &&
             (s[i + 1] == '.' || s[i + 1] == '!' || s[i + 1] == '?'))
        cur += s[++i];
      std::string t = text::trim(cur);
      if (!t.empty()) out.push_back(t);
      cur.clear();
    }
  }
  std::string t = text::trim(cur);
  if (!t.empty()) out.push_back(t);
  return out;
}

}  // namespace serialization

/// "Plan: a_1 q_1 ... Story: s_1 ... s_k", answers before their questions,
/// pairs in global blueprint order.
inline std::string serialize_topdown(const Blueprint& blueprint,
                                     const Story& story) {
  std::string plan = serialization::serialize_plan(blueprint);
  std::string out = std::string(markers::kPlan) + " " + plan + " " +
                    markers::kStory + " " + text::join(story.sentences, " ");
  return serialization::squeeze_spaces(out);
}

struct TopdownParse {
  Blueprint blueprint;
  Story story;
  std::vector<std::string> issues;  // unparseable regions, best-effort notes
};

/// Best-effort inverse of serialize_topdown; answer_spans stay unset.
/// Throws ParseError (carrying the recovered prefix) when "Story:" is absent.
inline TopdownParse parse_topdown(const std::string& raw) {
  TopdownParse out;
  size_t story_pos = raw.find(markers::kStory);
  if (story_pos == std::string::npos)
    throw ParseError("parse_topdown: missing Story: marker; recovered prefix: " +
                     raw.substr(0, std::min<size_t>(raw.size(), 200)));
  size_t plan_pos = raw.find(markers::kPlan);
  std::string plan_text;
  if (plan_pos != std::string::npos && plan_pos < story_pos) {
    size_t begin = plan_pos + std::char_traits<char>::length(markers::kPlan);
    plan_text = raw.substr(begin, story_pos - begin);
  } else {
    out.issues.push_back("missing Plan: marker");
  }
  out.blueprint = serialization::parse_plan(plan_text, &out.issues);
  std::string story_text =
      raw.substr(story_pos + std::char_traits<char>::length(markers::kStory));
  out.story.sentences = serialization::split_sentences(story_text);
  // A plan of one empty segment for a longer story means "no plan": pad.
  if (out.blueprint.pair_count() == 0 &&
      out.blueprint.segment_count() < out.story.sentences.size())
    out.blueprint.segments.resize(out.story.sentences.size());
  return out;
}

// ---------------------------------------------------------------------------
// Iterative expansion
// ---------------------------------------------------------------------------

struct IterativeStep {
  std::string context;  // loss-masked
  std::string target;
};

/// k+1 training steps per k-sentence sample; the final target is ⟨END⟩.
/// Context at step i is the concatenation of targets 0..i-1 behind the
/// Context: marker (⟨START⟩ at step 0).
inline std::vector<IterativeStep> expand_iterative_samples(
    const StorySample& sample) {
  if (!sample.blueprint)
    throw DomainError("expand_iterative_samples: sample " +
                      sample.image_sequence.sequence_id +
                      " has no blueprint");
  const Blueprint& bp = *sample.blueprint;
  size_t k = sample.story.sentences.size();
  if (bp.segment_count() != k)
    throw DomainError("expand_iterative_samples: blueprint misaligned for " +
                      sample.image_sequence.sequence_id);
  std::vector<IterativeStep> steps;
  std::vector<std::string> targets;
  for (size_t i = 0; i < k; ++i) {
    std::string seg = serialization::serialize_segment(bp.segments[i]);
    std::string target = serialization::squeeze_spaces(
        std::string(markers::kPlan) + " " + seg + " " +
        markers::kNextSentence + " " + sample.story.sentences[i]);
    std::string context =
        i == 0 ? std::string(markers::kStart)
               : serialization::squeeze_spaces(
                     std::string(markers::kContext) + " " +
                     text::join(targets, " "));
    steps.push_back({context, target});
    targets.push_back(target);
  }
  steps.push_back({serialization::squeeze_spaces(
                       std::string(markers::kContext) + " " +
                       text::join(targets, " ")),
                   std::string(markers::kEnd)});
  return steps;
}

// ---------------------------------------------------------------------------
// Model handle
// ---------------------------------------------------------------------------

enum class PlanMode { top_down, iterative };

inline std::string to_string(PlanMode m) {
  return m == PlanMode::top_down ? "top_down" : "iterative";
}

inline PlanMode plan_mode_from_string(const std::string& s) {
  if (s == "top_down") return PlanMode::top_down;
  if (s == "iterative") return PlanMode::iterative;
  throw ConfigError("unknown mode: " + s);
}

struct TrainConfig {
  double learning_rate = 3e-5;
  int batch_size = 64;
  double warmup_ratio = 0.05;
  int max_steps = 1000;
  uint64_t seed = 42;
  int checkpoint_every = 0;  // 0 = only final
  int max_target_tokens = 320;
};

struct DecodeConfig {
  int beam_size = 5;
  int max_output_tokens = 256;
  int max_iterations = 5;  // iterative mode
};

struct ModelHandle {
  TransformerConfig backbone_cfg;
  MappingNetworkConfig mapnet_cfg;
  PlanMode mode = PlanMode::top_down;
  int k_concepts = 5;

  Seq2SeqModel model;
  MappingNetwork mapnet;
  Tokenizer tokenizer;
  std::shared_ptr<ImageEncoder> encoder;    // frozen
  std::shared_ptr<ConceptDetector> detector;  // frozen

  /// θ and φ: the only trainable parameter sets.
  std::vector<nn::Parameter*> trainable_parameters() {
    auto out = model.parameters();
    for (auto* p : mapnet.parameters()) out.push_back(p);
    return out;
  }

  struct PrefixData {
    nn::Mat features;              // k × d_img (frozen encoder output)
    std::vector<int> concept_ids;  // token ids of the concept string
    std::string concept_string;
    ConceptSet concepts;
  };

  PrefixData prepare_prefix(const ImageSequence& images) {
    PrefixData d;
    d.features = extract_features(images, *encoder).vectors;
    if (k_concepts > 0) {
      d.concepts = detect_concepts(images, *detector, k_concepts);
      d.concept_string = build_concept_string(d.concepts);
      d.concept_ids = tokenizer.encode(d.concept_string);
    }
    return d;
  }

  /// Tape forward of the prefix: gradient flows into φ and the token
  /// embeddings of the concept tokens (θ). Encoder and detector stay frozen.
  int prefix_node(nn::Graph& g, const PrefixData& d) {
    int clues = mapnet.forward(g, g.input(d.features));
    if (d.concept_ids.empty()) return clues;
    int emb = model.token_embedding_node(g);
    int cemb = g.rows_of(emb, d.concept_ids);
    return g.concat_rows({clues, cemb});
  }

  nn::Mat prefix_plain(const PrefixData& d) {
    nn::Graph g;
    return g.val(prefix_node(g, d));
  }
};

/// Fresh handle with a vocabulary built from the corpus targets.
inline ModelHandle make_model_handle(
    const std::vector<StorySample>& corpus, PlanMode mode,
    TransformerConfig backbone = {}, MappingNetworkConfig mapnet_cfg = {},
    int k_concepts = 5, uint64_t seed = 42,
    std::shared_ptr<ImageEncoder> encoder = nullptr,
    std::shared_ptr<ConceptDetector> detector = nullptr) {
  ModelHandle h;
  h.mode = mode;
  h.k_concepts = k_concepts;
  h.encoder = encoder ? std::move(encoder)
                      : std::make_shared<SyntheticImageEncoder>(
                            mapnet_cfg.input_dim);
  h.detector = detector
                   ? std::move(detector)
                   : std::make_shared<SyntheticConceptDetector>(
                         SyntheticConceptDetector::with_default_vocabulary());
  // vocabulary from serialized targets + concept strings
  std::vector<std::string> texts;
  for (auto& s : corpus) {
    if (s.blueprint) texts.push_back(serialize_topdown(*s.blueprint, s.story));
    texts.push_back(s.story.joined());
  }
  if (k_concepts > 0) {
    for (auto& s : corpus) {
      auto cs = detect_concepts(s.image_sequence, *h.detector, k_concepts);
      texts.push_back(build_concept_string(cs));
    }
  }
  h.tokenizer.build_from_texts(texts);
  backbone.vocab = h.tokenizer.size();
  mapnet_cfg.output_dim = backbone.d_model;
  h.backbone_cfg = backbone;
  h.mapnet_cfg = mapnet_cfg;
  h.model = Seq2SeqModel(backbone);
  h.mapnet = MappingNetwork(mapnet_cfg);
  std::mt19937_64 rng(seed);
  h.model.init(rng);
  h.mapnet.init(rng);
  return h;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainRow {
  size_t sample_index = 0;
  std::vector<int> context_ids;  // masked
  std::vector<int> target_ids;   // supervised
};

namespace training_detail {

inline std::vector<int> truncate_ids(std::vector<int> ids, int limit,
                                     size_t* truncations) {
  if (limit > 0 && static_cast<int>(ids.size()) > limit) {
    ids.resize(static_cast<size_t>(limit));
    if (truncations) ++*truncations;
  }
  return ids;
}

}  // namespace training_detail

struct PerTokenLoss {
  std::vector<double> losses;  // aligned with label positions
  std::vector<double> mask;    // 1 = supervised, 0 = context
  double mean_loss = 0.0;
};

/// Forward (and optionally backward) of one row. Decoder input is
/// [BOS, context, target]; labels are the same stream shifted left plus EOS.
/// Context label positions carry mask 0 and contribute exactly zero loss.
inline PerTokenLoss row_loss(ModelHandle& h, const ModelHandle::PrefixData& pd,
                             const TrainRow& row, bool do_backward) {
  std::vector<int> stream;
  stream.push_back(Tokenizer::kBos);
  stream.insert(stream.end(), row.context_ids.begin(), row.context_ids.end());
  stream.insert(stream.end(), row.target_ids.begin(), row.target_ids.end());
  std::vector<int> labels(stream.begin() + 1, stream.end());
  labels.push_back(Tokenizer::kEos);
  std::vector<double> mask(labels.size(), 1.0);
  // positions predicting context tokens are masked out
  for (size_t i = 0; i < row.context_ids.size(); ++i) mask[i] = 0.0;

  nn::Graph g;
  int prefix = h.prefix_node(g, pd);
  int enc = h.model.encode(g, prefix);
  int logits = h.model.decode_logits(g, enc, stream);
  auto ce = g.cross_entropy_rows(logits, labels, mask);
  if (do_backward) g.backward(ce.loss_id);
  PerTokenLoss out;
  out.losses = ce.per_token;
  out.mask = std::move(mask);
  out.mean_loss = g.val(ce.loss_id)(0, 0);
  return out;
}

struct TrainResult {
  std::vector<double> loss_curve;  // mean loss per step
  size_t truncated_rows = 0;
  std::vector<std::string> checkpoint_dirs;
};

// forward declaration (checkpointing)
inline void save_checkpoint(ModelHandle& h, const std::string& dir,
                            const std::vector<double>& loss_curve = {});

namespace training_detail {

inline std::vector<TrainRow> build_rows(ModelHandle& h,
                                        const std::vector<StorySample>& corpus,
                                        const TrainConfig& cfg,
                                        size_t* truncations) {
  std::vector<TrainRow> rows;
  for (size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus[i];
    if (!s.blueprint)
      throw DomainError("training: sample " + s.image_sequence.sequence_id +
                        " has no blueprint");
    if (h.mode == PlanMode::top_down) {
      TrainRow r;
      r.sample_index = i;
      r.target_ids = truncate_ids(
          h.tokenizer.encode(serialize_topdown(*s.blueprint, s.story)),
          cfg.max_target_tokens, truncations);
      rows.push_back(std::move(r));
    } else {
      for (auto& step : expand_iterative_samples(s)) {
        TrainRow r;
        r.sample_index = i;
        r.context_ids = h.tokenizer.encode(step.context);
        r.target_ids = h.tokenizer.encode(step.target);
        // truncate from the left of the context if the row is too long
        int limit = cfg.max_target_tokens;
        int total = static_cast<int>(r.context_ids.size() +
                                     r.target_ids.size());
        if (limit > 0 && total > limit) {
          int drop = total - limit;
          if (drop < static_cast<int>(r.context_ids.size())) {
            r.context_ids.erase(r.context_ids.begin(),
                                r.context_ids.begin() + drop);
            if (truncations) ++*truncations;
          } else {
            r.target_ids = truncate_ids(r.target_ids, limit, truncations);
            r.context_ids.clear();
          }
        }
        rows.push_back(std::move(r));
      }
    }
  }
  return rows;
}

}  // namespace training_detail

/// Shared trainer for both objectives. Iterative steps are independent
/// training rows; gradients accumulate over a batch, then one Adam step.
inline TrainResult train(const std::vector<StorySample>& corpus,
                         ModelHandle& h, const TrainConfig& cfg,
                         const std::string& checkpoint_dir = "") {
  TrainResult result;
  auto rows =
      training_detail::build_rows(h, corpus, cfg, &result.truncated_rows);
  if (rows.empty()) throw DomainError("training: no rows");

  // Frozen-encoder outputs are fixed; compute once per sample.
  std::vector<ModelHandle::PrefixData> prefixes;
  prefixes.reserve(corpus.size());
  for (auto& s : corpus) prefixes.push_back(h.prepare_prefix(s.image_sequence));

  nn::AdamConfig acfg;
  acfg.lr = cfg.learning_rate;
  acfg.warmup_ratio = cfg.warmup_ratio;
  acfg.total_steps = cfg.max_steps;
  nn::Adam opt(h.trainable_parameters(), acfg);

  std::mt19937_64 rng(cfg.seed);
  std::vector<size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = rows.size();  // trigger shuffle on first use

  for (int step = 0; step < cfg.max_steps; ++step) {
    opt.zero_grad();
    double step_loss = 0.0;
    int in_batch = std::min<int>(cfg.batch_size, static_cast<int>(rows.size()));
    for (int b = 0; b < in_batch; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const TrainRow& row = rows[order[cursor++]];
      auto pl = row_loss(h, prefixes[row.sample_index], row,
                         /*do_backward=*/true);
      step_loss += pl.mean_loss;
    }
    // scale accumulated gradients to the batch mean
    for (auto* p : h.trainable_parameters()) p->grad /= in_batch;
    opt.step();
    result.loss_curve.push_back(step_loss / in_batch);
    if (!checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
        (step + 1) % cfg.checkpoint_every == 0) {
      std::string dir =
          checkpoint_dir + "/step-" + std::to_string(step + 1);
      save_checkpoint(h, dir, result.loss_curve);
      result.checkpoint_dirs.push_back(dir);
    }
  }
  if (!checkpoint_dir.empty()) {
    std::string dir = checkpoint_dir + "/final";
    save_checkpoint(h, dir, result.loss_curve);
    result.checkpoint_dirs.push_back(dir);
  }
  return result;
}

inline TrainResult train_topdown(const std::vector<StorySample>& corpus,
                                 ModelHandle& h, const TrainConfig& cfg,
                                 const std::string& checkpoint_dir = "") {
  if (h.mode != PlanMode::top_down)
    throw ConfigError("train_topdown: handle is not in top_down mode");
  return train(corpus, h, cfg, checkpoint_dir);
}

inline TrainResult train_iterative(const std::vector<StorySample>& corpus,
                                   ModelHandle& h, const TrainConfig& cfg,
                                   const std::string& checkpoint_dir = "") {
  if (h.mode != PlanMode::iterative)
    throw ConfigError("train_iterative: handle is not in iterative mode");
  return train(corpus, h, cfg, checkpoint_dir);
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct GenerationStep {
  std::string context;
  std::string plan_text;
  std::string sentence;
};

struct GenerationTrace {
  Blueprint blueprint;
  Story story;
  std::vector<GenerationStep> steps;  // iterative mode
  std::string raw_text;
  std::vector<std::string> flags;  // "truncated", "parse_error", ...
};

inline GenerationTrace generate_topdown(const ImageSequence& images,
                                        ModelHandle& h,
                                        const DecodeConfig& cfg) {
  auto pd = h.prepare_prefix(images);
  nn::Mat enc_out = h.model.encode_plain(h.prefix_plain(pd));
  auto tokens = beam_search(h.model, enc_out, Tokenizer::kBos, Tokenizer::kEos,
                            cfg.beam_size, cfg.max_output_tokens);
  GenerationTrace trace;
  trace.raw_text = h.tokenizer.decode(tokens);
  try {
    auto parsed = parse_topdown(trace.raw_text);
    trace.blueprint = std::move(parsed.blueprint);
    trace.story = std::move(parsed.story);
    for (auto& i : parsed.issues) trace.flags.push_back("parse: " + i);
  } catch (const ParseError&) {
    trace.flags.push_back("truncated");
    // best-effort: salvage plan text if present
    size_t plan_pos = trace.raw_text.find(markers::kPlan);
    if (plan_pos != std::string::npos)
      trace.blueprint = serialization::parse_plan(trace.raw_text.substr(
          plan_pos + std::char_traits<char>::length(markers::kPlan)));
  }
  return trace;
}

struct IterStepParse {
  SentenceBlueprint segment;
  std::string plan_text;
  std::string sentence;
  bool is_end = false;
  bool ok = false;
};

inline IterStepParse parse_iterative_step(const std::string& raw) {
  IterStepParse out;
  std::string s = text::trim(raw);
  if (s == markers::kEnd) {
    out.is_end = true;
    out.ok = true;
    return out;
  }
  size_t plan_pos = s.find(markers::kPlan);
  size_t next_pos = s.find(markers::kNextSentence);
  if (plan_pos == std::string::npos || next_pos == std::string::npos ||
      next_pos < plan_pos)
    return out;
  size_t plan_begin = plan_pos + std::char_traits<char>::length(markers::kPlan);
  out.plan_text = text::trim(s.substr(plan_begin, next_pos - plan_begin));
  out.segment = serialization::parse_segment(out.plan_text);
  out.sentence = text::trim(
      s.substr(next_pos + std::char_traits<char>::length(markers::kNextSentence)));
  // A decode may run past the step boundary: the stream position at the end
  // of a step target is indistinguishable from the same position inside the
  // next row's context, so the model can legitimately continue with the next
  // plan or the end marker. Truncate at a run-on plan; treat a trailing end
  // marker as "this was the final sentence".
  size_t run_on = out.sentence.find(markers::kPlan);
  if (run_on != std::string::npos)
    out.sentence = text::trim(out.sentence.substr(0, run_on));
  const std::string end_marker = markers::kEnd;
  if (out.sentence.size() >= end_marker.size() &&
      out.sentence.compare(out.sentence.size() - end_marker.size(),
                           end_marker.size(), end_marker) == 0) {
    out.is_end = true;
    out.sentence = text::trim(
        out.sentence.substr(0, out.sentence.size() - end_marker.size()));
  }
  out.ok = !out.sentence.empty() || out.is_end;
  return out;
}

/// Iterative decoding: ⟨START⟩, then per-step beam decode conditioned on the
/// visual prefix plus accumulated context; stops on ⟨END⟩ or the iteration
/// cap. Malformed steps are retried once greedily, then generation stops with
/// a truncation flag.
inline GenerationTrace generate_iterative(const ImageSequence& images,
                                          ModelHandle& h,
                                          const DecodeConfig& cfg) {
  auto pd = h.prepare_prefix(images);
  nn::Mat enc_out = h.model.encode_plain(h.prefix_plain(pd));
  GenerationTrace trace;
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
      std::vector<int> emittedids(tokens.begin() + 1 + forced.size(),
                                  tokens.end());
      return h.tokenizer.decode(emittedids);
    };
    std::string step_text = decode_once(cfg.beam_size);
    auto parsed = parse_iterative_step(step_text);
    if (!parsed.ok) {
      step_text = decode_once(1);  // one greedy retry
      parsed = parse_iterative_step(step_text);
      if (!parsed.ok) {
        trace.flags.push_back("truncated");
        break;
      }
    }
    if (!trace.raw_text.empty()) trace.raw_text += " ";
    trace.raw_text += step_text;
    if (!parsed.sentence.empty()) {
      trace.steps.push_back({context, parsed.plan_text, parsed.sentence});
      trace.blueprint.segments.push_back(parsed.segment);
      trace.story.sentences.push_back(parsed.sentence);
      emitted.push_back(serialization::squeeze_spaces(
          std::string(markers::kPlan) + " " + parsed.plan_text + " " +
          markers::kNextSentence + " " + parsed.sentence));
    }
    if (parsed.is_end) break;
  }
  return trace;
}

inline GenerationTrace generate(const ImageSequence& images, ModelHandle& h,
                                const DecodeConfig& cfg) {
  return h.mode == PlanMode::top_down ? generate_topdown(images, h, cfg)
                                      : generate_iterative(images, h, cfg);
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline json handle_config_json(const ModelHandle& h) {
  json j;
  j["mode"] = to_string(h.mode);
  j["k_concepts"] = h.k_concepts;
  j["backbone"] = {{"d_model", h.backbone_cfg.d_model},
                   {"n_heads", h.backbone_cfg.n_heads},
                   {"d_ffn", h.backbone_cfg.d_ffn},
                   {"enc_layers", h.backbone_cfg.enc_layers},
                   {"dec_layers", h.backbone_cfg.dec_layers},
                   {"vocab", h.backbone_cfg.vocab},
                   {"max_len", h.backbone_cfg.max_len},
                   {"max_prefix", h.backbone_cfg.max_prefix}};
  j["mapnet"] = {{"input_dim", h.mapnet_cfg.input_dim},
                 {"hidden_dim", h.mapnet_cfg.hidden_dim},
                 {"output_dim", h.mapnet_cfg.output_dim},
                 {"depth", h.mapnet_cfg.depth},
                 {"joint", h.mapnet_cfg.joint},
                 {"sequence_length", h.mapnet_cfg.sequence_length}};
  return j;
}

/// Layout: config.json + tokenizer.json + weights.bin + metrics.log.
inline void save_checkpoint(ModelHandle& h, const std::string& dir,
                            const std::vector<double>& loss_curve) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(dir + "/config.json");
    if (!out) throw IoError("cannot write checkpoint config: " + dir);
    out << handle_config_json(h).dump(2) << '\n';
  }
  h.tokenizer.save(dir + "/tokenizer.json");
  {
    std::ofstream out(dir + "/weights.bin", std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint weights: " + dir);
    Seq2SeqModel::write_params(out, h.model.parameters());
    Seq2SeqModel::write_params(out, h.mapnet.parameters());
  }
  {
    std::ofstream out(dir + "/metrics.log");
    for (size_t i = 0; i < loss_curve.size(); ++i)
      out << i + 1 << ' ' << loss_curve[i] << '\n';
  }
}

/// Frozen adapters are supplied by the caller (they are configuration, not
/// checkpoint state); defaults match make_model_handle.
inline ModelHandle load_checkpoint(
    const std::string& dir,
    std::shared_ptr<ImageEncoder> encoder = nullptr,
    std::shared_ptr<ConceptDetector> detector = nullptr) {
  std::ifstream cfgin(dir + "/config.json");
  if (!cfgin) throw IoError("cannot read checkpoint config: " + dir);
  json j;
  cfgin >> j;
  ModelHandle h;
  h.mode = plan_mode_from_string(j.at("mode").get<std::string>());
  h.k_concepts = j.at("k_concepts").get<int>();
  auto& b = j.at("backbone");
  h.backbone_cfg = TransformerConfig{
      b.at("d_model"), b.at("n_heads"), b.at("d_ffn"),  b.at("enc_layers"),
      b.at("dec_layers"), b.at("vocab"), b.at("max_len"), b.at("max_prefix")};
  auto& m = j.at("mapnet");
  h.mapnet_cfg = MappingNetworkConfig{
      m.at("input_dim"), m.at("hidden_dim"), m.at("output_dim"),
      m.at("depth"),     m.at("joint"),      m.at("sequence_length")};
  h.tokenizer = Tokenizer::load(dir + "/tokenizer.json");
  h.model = Seq2SeqModel(h.backbone_cfg);
  h.mapnet = MappingNetwork(h.mapnet_cfg);
  std::ifstream win(dir + "/weights.bin", std::ios::binary);
  if (!win) throw IoError("cannot read checkpoint weights: " + dir);
  Seq2SeqModel::read_params(win, h.model.parameters());
  Seq2SeqModel::read_params(win, h.mapnet.parameters());
  h.encoder = encoder ? std::move(encoder)
                      : std::make_shared<SyntheticImageEncoder>(
                            h.mapnet_cfg.input_dim);
  h.detector = detector
                   ? std::move(detector)
                   : std::make_shared<SyntheticConceptDetector>(
                         SyntheticConceptDetector::with_default_vocabulary());
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoint selection: QA-based faithfulness on the validation set
// ---------------------------------------------------------------------------

/// Scoring callback: mean faithfulness of generated stories to their own
/// predicted blueprints (see metrics::faithfulness); injectable for tests.
using CheckpointScorer = std::function<double(ModelHandle&)>;

/// Returns the index of the best checkpoint; ties go to the later one.
inline size_t select_checkpoint(std::vector<ModelHandle>& checkpoints,
                                const CheckpointScorer& score) {
  if (checkpoints.empty())
    throw DomainError("select_checkpoint: no checkpoints");
  size_t best = 0;
  double best_score = -1;
  for (size_t i = 0; i < checkpoints.size(); ++i) {
    double s = score(checkpoints[i]);
    if (s >= best_score) {  // >= implements the later-checkpoint tie rule
      best_score = s;
      best = i;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Generation output schema
// ---------------------------------------------------------------------------

inline json trace_to_json(const std::string& sequence_id,
                          const GenerationTrace& trace) {
  json j;
  j["sequence_id"] = sequence_id;
  j["raw_text"] = trace.raw_text;
  j["story"] = trace.story.sentences;
  json bp = json::array();
  for (auto& seg : trace.blueprint.segments) {
    json jseg = json::array();
    for (auto& p : seg.pairs)
      jseg.push_back({{"answer", p.answer}, {"question", p.question}});
    bp.push_back(std::move(jseg));
  }
  j["blueprint"] = std::move(bp);
  if (!trace.steps.empty()) {
    json steps = json::array();
    for (auto& s : trace.steps)
      steps.push_back({{"context", s.context},
                       {"plan", s.plan_text},
                       {"sentence", s.sentence}});
    j["steps"] = std::move(steps);
  }
  j["flags"] = trace.flags;
  return j;
}

}  // namespace storyplan
