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
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "storyplan/adapters.hpp"
#include "storyplan/corpus.hpp"
#include "storyplan/errors.hpp"
#include "storyplan/text.hpp"
#include "storyplan/visual_prefix.hpp"

namespace storyplan::metrics {

// ---------------------------------------------------------------------------
// Trigram repetition
// ---------------------------------------------------------------------------

struct RepetitionConfig {
  /// When true, trigram streams are per sentence (no cross-sentence
  /// trigrams); the default runs over the whole-story token stream.
  bool per_sentence = false;
};

inline std::vector<std::string> story_trigrams(const Story& story,
                                               const RepetitionConfig& cfg) {
  std::vector<std::string> trigrams;
  auto collect = [&](const std::vector<std::string>& toks) {
    for (size_t i = 0; i + 2 < toks.size(); ++i)
      trigrams.push_back(toks[i] + " " + toks[i + 1] + " " + toks[i + 2]);
  };
  if (cfg.per_sentence) {
    for (auto& s : story.sentences) collect(text::word_tokens(s));
  } else {
    collect(text::word_tokens(story.joined()));
  }
  return trigrams;
}

/// (T − D) / T over the story's trigram occurrences; 0 when T = 0.
inline double intra_repetition(const Story& story,
                               const RepetitionConfig& cfg = {}) {
  auto trigrams = story_trigrams(story, cfg);
  if (trigrams.empty()) return 0.0;
  std::unordered_set<std::string> distinct(trigrams.begin(), trigrams.end());
  double t = static_cast<double>(trigrams.size());
  double d = static_cast<double>(distinct.size());
  return (t - d) / t;
}

/// Mean over stories of: fraction of the story's distinct trigrams that
/// appear in at least one other story.
inline double inter_repetition(const std::vector<Story>& stories,
                               const RepetitionConfig& cfg = {}) {
  if (stories.size() < 2)
    throw DomainError("inter_repetition: need at least 2 stories");
  std::vector<std::unordered_set<std::string>> sets;
  std::unordered_map<std::string, int> counts;  // #stories containing trigram
  for (auto& s : stories) {
    auto tg = story_trigrams(s, cfg);
    sets.emplace_back(tg.begin(), tg.end());
    for (auto& t : sets.back()) counts[t]++;
  }
  double total = 0;
  for (auto& st : sets) {
    if (st.empty()) continue;
    size_t shared = 0;
    for (auto& t : st)
      if (counts[t] > 1) ++shared;
    total += static_cast<double>(shared) / static_cast<double>(st.size());
  }
  return total / static_cast<double>(stories.size());
}

// ---------------------------------------------------------------------------
// Concept grounding
// ---------------------------------------------------------------------------

struct GroundingResult {
  double value = 0.0;
  bool zero_content_warning = false;
};

/// Lemma set of the flattened concept lexicon (content lemmas of every
/// concept string).
inline std::unordered_set<std::string> concept_lexicon(
    const ConceptSet& concepts) {
  std::unordered_set<std::string> lex;
  for (auto& img : concepts.per_image)
    for (auto& c : img)
      for (auto& w : text::content_words(c.label))
        lex.insert(text::lemma(w));
  return lex;
}

/// |story content words matched in the concept lexicon| / |content words|.
inline GroundingResult grounding_precision(const Story& story,
                                           const ConceptSet& concepts) {
  if (concepts.per_image.empty() || concepts.flattened().empty())
    throw DomainError("grounding_precision: empty concept set");
  auto lex = concept_lexicon(concepts);
  size_t matched = 0, total = 0;
  for (auto& w : text::content_words(story.joined())) {
    ++total;
    if (lex.count(text::lemma(w))) ++matched;
  }
  if (total == 0) return {0.0, true};
  return {static_cast<double>(matched) / static_cast<double>(total), false};
}

/// |concepts appearing in the story| / |concepts|. A multi-word concept
/// counts as present when all its content lemmas occur within one sentence.
inline double grounding_recall(const Story& story, const ConceptSet& concepts) {
  auto flat = concepts.flattened();
  if (flat.empty()) throw DomainError("grounding_recall: empty concept set");
  std::vector<std::unordered_set<std::string>> sentence_lemmas;
  for (auto& s : story.sentences) {
    std::unordered_set<std::string> lem;
    for (auto& w : text::content_words(s)) lem.insert(text::lemma(w));
    sentence_lemmas.push_back(std::move(lem));
  }
  size_t present = 0;
  for (auto& c : flat) {
    auto words = text::content_words(c);
    if (words.empty()) continue;
    bool found = false;
    for (auto& lem : sentence_lemmas) {
      bool all = true;
      for (auto& w : words)
        if (!lem.count(text::lemma(w))) {
          all = false;
          break;
        }
      if (all) {
        found = true;
        break;
      }
    }
    if (found) ++present;
  }
  return static_cast<double>(present) / static_cast<double>(flat.size());
}

// ---------------------------------------------------------------------------
// Blueprint faithfulness
// ---------------------------------------------------------------------------

struct FaithfulnessConfig {
  double f1_threshold = 0.5;
};

/// Percentage of blueprint questions the QA model answers from the story
/// (token-F1 against the blueprint answer at the configured threshold).
inline double faithfulness(const Blueprint& blueprint, const Story& story,
                           QuestionAnswerer& qa,
                           const FaithfulnessConfig& cfg = {}) {
  auto pairs = blueprint.flattened();
  if (pairs.empty()) throw DomainError("faithfulness: empty blueprint");
  std::string context = story.joined();
  size_t answered = 0;
  for (auto& p : pairs) {
    QaResult r = qa.answer(p.question, context);
    if (text::token_f1(r.answer, p.answer) >= cfg.f1_threshold) ++answered;
  }
  return 100.0 * static_cast<double>(answered) /
         static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// External metric adapters (MAUVE, BLEU, ROUGE, METEOR, CIDEr)
// ---------------------------------------------------------------------------

struct MetricRun {
  std::vector<std::string> hypotheses;
  std::vector<std::string> references;
};

class ExternalMetricAdapter {
 public:
  virtual ~ExternalMetricAdapter() = default;
  virtual double compute(const MetricRun& run) = 0;
  virtual std::string version() const = 0;
};

/// Pass-through registry; internals of the external metrics are out of scope.
class ExternalMetricRegistry {
 public:
  void register_adapter(const std::string& name,
                        std::shared_ptr<ExternalMetricAdapter> adapter) {
    adapters_[name] = std::move(adapter);
  }

  bool has(const std::string& name) const { return adapters_.count(name) > 0; }

  double compute(const std::string& name, const MetricRun& run) const {
    auto it = adapters_.find(name);
    if (it == adapters_.end())
      throw CapabilityError(
          "external metric '" + name +
          "' is not configured; install/point to an implementation in the "
          "metrics section of the config (e.g. a command adapter)");
    return it->second->compute(run);
  }

  std::string version(const std::string& name) const {
    auto it = adapters_.find(name);
    return it == adapters_.end() ? "unconfigured" : it->second->version();
  }

 private:
  std::map<std::string, std::shared_ptr<ExternalMetricAdapter>> adapters_;
};

/// Shells out to a configured command; the command reads a JSON MetricRun on
/// a temp file and prints one number.
class CommandMetricAdapter : public ExternalMetricAdapter {
 public:
  CommandMetricAdapter(std::string command, std::string version)
      : command_(std::move(command)), version_(std::move(version)) {}

  double compute(const MetricRun& run) override {
    std::string in_path = temp_path();
    {
      nlohmann::json j{{"hypotheses", run.hypotheses},
                       {"references", run.references}};
      std::ofstream out(in_path);
      out << j.dump();
    }
    std::string out_path = in_path + ".out";
    std::string cmd = command_ + " " + in_path + " > " + out_path;
    int rc = std::system(cmd.c_str());
    if (rc != 0)
      throw CapabilityError("metric command failed (" + std::to_string(rc) +
                            "): " + command_);
    std::ifstream in(out_path);
    double value = 0;
    if (!(in >> value))
      throw CapabilityError("metric command produced no value: " + command_);
    std::remove(in_path.c_str());
    std::remove(out_path.c_str());
    return value;
  }

  std::string version() const override { return version_; }

 private:
  static std::string temp_path() {
    static int counter = 0;
    return "/tmp/storyplan_metric_" + std::to_string(++counter) + ".json";
  }

  std::string command_;
  std::string version_;
};

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct EvaluationReport {
  std::map<std::string, double> corpus_metrics;
  std::vector<std::map<std::string, double>> per_sample;
  nlohmann::json config_snapshot;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["corpus_metrics"] = corpus_metrics;
    j["per_sample"] = per_sample;
    j["config_snapshot"] = config_snapshot;
    return j;
  }

  std::string to_csv() const {
    std::string out = "metric,value\n";
    for (auto& [k, v] : corpus_metrics)
      out += k + "," + std::to_string(v) + "\n";
    return out;
  }
};

struct EvaluateOptions {
  RepetitionConfig repetition;
  FaithfulnessConfig faithfulness;
  /// Metric names routed through the external registry (empty = none).
  std::vector<std::string> external;
};

struct EvalSample {
  std::string sequence_id;
  Story story;
  std::optional<Blueprint> blueprint;  // predicted blueprint, for faithfulness
  std::optional<ConceptSet> concepts;
  std::optional<Story> reference;
};

/// Story-specific metrics over a generation run; corpus values are means of
/// per-sample values (inter-repetition is corpus-level by definition).
inline EvaluationReport evaluate(const std::vector<EvalSample>& samples,
                                 QuestionAnswerer* qa,
                                 const ExternalMetricRegistry& registry = {},
                                 const EvaluateOptions& opts = {}) {
  if (samples.empty()) throw DomainError("evaluate: no samples");
  EvaluationReport report;
  report.config_snapshot = {
      {"repetition_per_sentence", opts.repetition.per_sentence},
      {"faithfulness_f1_threshold", opts.faithfulness.f1_threshold}};

  std::vector<Story> stories;
  for (auto& s : samples) stories.push_back(s.story);

  auto mean_of = [&](const std::string& key) {
    double total = 0;
    size_t n = 0;
    for (auto& ps : report.per_sample) {
      auto it = ps.find(key);
      if (it != ps.end()) {
        total += it->second;
        ++n;
      }
    }
    return n ? total / static_cast<double>(n) : 0.0;
  };

  for (auto& s : samples) {
    std::map<std::string, double> ps;
    ps["intra_repetition"] = intra_repetition(s.story, opts.repetition);
    if (s.concepts && !s.concepts->flattened().empty()) {
      ps["grounding_precision"] =
          grounding_precision(s.story, *s.concepts).value;
      ps["grounding_recall"] = grounding_recall(s.story, *s.concepts);
    }
    if (qa && s.blueprint && s.blueprint->pair_count() > 0)
      ps["faithfulness"] =
          faithfulness(*s.blueprint, s.story, *qa, opts.faithfulness);
    report.per_sample.push_back(std::move(ps));
  }
  std::set<std::string> keys;
  for (auto& ps : report.per_sample)
    for (auto& [k, v] : ps) keys.insert(k);

  // corpus means run over the samples that define each metric
  report.corpus_metrics["intra_repetition"] = mean_of("intra_repetition");
  if (keys.count("grounding_precision")) {
    report.corpus_metrics["grounding_precision"] =
        mean_of("grounding_precision");
    report.corpus_metrics["grounding_recall"] = mean_of("grounding_recall");
  }
  if (keys.count("faithfulness"))
    report.corpus_metrics["faithfulness"] = mean_of("faithfulness");
  if (samples.size() >= 2)
    report.corpus_metrics["inter_repetition"] =
        inter_repetition(stories, opts.repetition);

  // identical key sets across per-sample maps (absent metrics report 0)
  for (auto& ps : report.per_sample)
    for (auto& k : keys)
      if (!ps.count(k)) ps[k] = 0.0;

  if (!opts.external.empty()) {
    MetricRun run;
    for (auto& s : samples) {
      run.hypotheses.push_back(s.story.joined());
      run.references.push_back(s.reference ? s.reference->joined() : "");
    }
    for (auto& name : opts.external) {
      report.corpus_metrics[name] = registry.compute(name, run);
      report.config_snapshot["external_versions"][name] =
          registry.version(name);
    }
  }
  return report;
}

}  // namespace storyplan::metrics
