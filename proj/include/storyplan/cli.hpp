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

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "storyplan/annotation.hpp"
#include "storyplan/control.hpp"
#include "storyplan/corpus.hpp"
#include "storyplan/errors.hpp"
#include "storyplan/metrics.hpp"
#include "storyplan/story_models.hpp"

namespace storyplan::cli {

inline constexpr const char* kVersion = "storyplan 0.1.0";

// ---------------------------------------------------------------------------
// Layered configuration: defaults < config file < command-line flags
// ---------------------------------------------------------------------------

inline json default_config() {
  return json{
      {"seed", 42},
      {"annotate",
       {{"parallelism", 1},
        {"max_candidates", 0},
        {"match_rule", "exact"},
        {"tau", 0.8}}},
      {"model",
       {{"mode", "top_down"},
        {"k_concepts", 5},
        {"d_model", 64},
        {"n_heads", 4},
        {"d_ffn", 128},
        {"enc_layers", 1},
        {"dec_layers", 2},
        {"max_len", 384},
        {"max_prefix", 96},
        {"feature_dim", 128},
        {"mapnet_hidden", 128},
        {"concepts_file", ""}}},
      {"train",
       {{"learning_rate", 3e-5},
        {"batch_size", 64},
        {"warmup_ratio", 0.05},
        {"max_steps", 1000},
        {"checkpoint_every", 0},
        {"max_target_tokens", 320}}},
      {"decode",
       {{"beam_size", 5}, {"max_output_tokens", 256}, {"max_iterations", 5}}},
      {"evaluate",
       {{"per_sentence_repetition", false},
        {"faithfulness_f1_threshold", 0.5},
        {"external", json::array()}}},
      {"refine", {{"strict_full_phrase", false}}}};
}

/// Fail-fast schema check: any key outside the default schema is an error
/// naming the full key path.
inline void validate_config(const json& cfg, const json& schema,
                            const std::string& prefix = "") {
  if (!cfg.is_object())
    throw ConfigError("config section '" + prefix + "' must be an object");
  for (auto& [key, value] : cfg.items()) {
    std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.contains(key))
      throw ConfigError("unknown config key: " + path);
    if (schema.at(key).is_object()) validate_config(value, schema.at(key), path);
  }
}

inline void merge_into(json& base, const json& overlay) {
  for (auto& [key, value] : overlay.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object())
      merge_into(base[key], value);
    else
      base[key] = value;
  }
}

inline json load_config(const std::string& path) {
  json cfg = default_config();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    json file;
    try {
      in >> file;
    } catch (const std::exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
    validate_config(file, default_config());
    merge_into(cfg, file);
  }
  return cfg;
}

inline uint64_t config_hash(const json& cfg) {
  std::string s = cfg.dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

inline std::string timestamp_utc() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

inline void write_manifest(const std::string& path, const std::string& command,
                           const json& cfg, const json& inputs,
                           const json& outputs) {
  json m;
  m["tool"] = kVersion;
  m["command"] = command;
  m["timestamp_utc"] = timestamp_utc();
  m["seed"] = cfg.at("seed");
  m["config"] = cfg;
  m["config_hash"] = config_hash(cfg);
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path);
  out << m.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Config -> library structs
// ---------------------------------------------------------------------------

inline TransformerConfig backbone_from(const json& m) {
  TransformerConfig cfg;
  cfg.d_model = m.at("d_model").get<int>();
  cfg.n_heads = m.at("n_heads").get<int>();
  cfg.d_ffn = m.at("d_ffn").get<int>();
  cfg.enc_layers = m.at("enc_layers").get<int>();
  cfg.dec_layers = m.at("dec_layers").get<int>();
  cfg.max_len = m.at("max_len").get<int>();
  cfg.max_prefix = m.at("max_prefix").get<int>();
  return cfg;
}

inline MappingNetworkConfig mapnet_from(const json& m) {
  MappingNetworkConfig cfg;
  cfg.input_dim = m.at("feature_dim").get<int>();
  cfg.hidden_dim = m.at("mapnet_hidden").get<int>();
  return cfg;
}

inline TrainConfig train_from(const json& cfg) {
  const json& t = cfg.at("train");
  TrainConfig out;
  out.learning_rate = t.at("learning_rate").get<double>();
  out.batch_size = t.at("batch_size").get<int>();
  out.warmup_ratio = t.at("warmup_ratio").get<double>();
  out.max_steps = t.at("max_steps").get<int>();
  out.checkpoint_every = t.at("checkpoint_every").get<int>();
  out.max_target_tokens = t.at("max_target_tokens").get<int>();
  out.seed = cfg.at("seed").get<uint64_t>();
  return out;
}

inline DecodeConfig decode_from(const json& cfg) {
  const json& d = cfg.at("decode");
  DecodeConfig out;
  out.beam_size = d.at("beam_size").get<int>();
  out.max_output_tokens = d.at("max_output_tokens").get<int>();
  out.max_iterations = d.at("max_iterations").get<int>();
  return out;
}

inline std::shared_ptr<ConceptDetector> detector_from(const json& m) {
  std::string path = m.at("concepts_file").get<std::string>();
  if (!path.empty()) return std::make_shared<FileConceptDetector>(path);
  return std::make_shared<SyntheticConceptDetector>(
      SyntheticConceptDetector::with_default_vocabulary());
}

inline AdapterBundle adapters_from(const json& cfg) {
  const json& a = cfg.at("annotate");
  AdapterBundle b = AdapterBundle::heuristic();
  std::string rule = a.at("match_rule").get<std::string>();
  if (rule == "exact")
    b.match.rule = MatchRule::exact;
  else if (rule == "token_f1")
    b.match.rule = MatchRule::token_f1;
  else
    throw ConfigError("unknown annotate.match_rule: " + rule);
  b.match.tau = a.at("tau").get<double>();
  b.max_candidates_per_story =
      static_cast<size_t>(a.at("max_candidates").get<int>());
  return b;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace detail {

inline int cmd_stats(const json& cfg, const std::string& input,
                     std::ostream& out) {
  auto corpus = load_corpus(input);
  auto st = compute_stats(corpus);
  json j;
  j["stories"] = corpus.size();
  j["avg_images_per_sequence"] = st.avg_images_per_sequence;
  j["avg_sentences_per_story"] = st.avg_sentences_per_story;
  j["avg_tokens_per_story"] = st.avg_tokens_per_story;
  if (st.avg_qa_pairs_per_story) {
    j["avg_qa_pairs_per_story"] = *st.avg_qa_pairs_per_story;
    j["avg_tokens_per_qa_pair"] = *st.avg_tokens_per_qa_pair;
    j["avg_tokens_story_plus_qa"] = *st.avg_tokens_story_plus_qa;
  }
  out << j.dump(2) << '\n';
  return 0;
}

inline int cmd_annotate(const json& cfg, const std::string& input,
                        const std::string& output, std::ostream& out,
                        std::ostream& err) {
  auto corpus = load_corpus(input);
  auto bundle = adapters_from(cfg);
  unsigned parallelism = static_cast<unsigned>(
      cfg.at("annotate").at("parallelism").get<int>());
  auto result = annotate_corpus(corpus, bundle, parallelism);
  save_corpus(result.samples, output);
  for (auto& f : result.failures)
    err << "annotate: sample " << f.sequence_id << ": " << f.error << '\n';
  write_manifest(output + ".manifest.json", "annotate", cfg,
                 {{"corpus", input}},
                 {{"corpus", output},
                  {"annotated", result.samples.size() - result.failures.size()},
                  {"failed", result.failures.size()}});
  out << "annotated " << result.samples.size() - result.failures.size() << "/"
      << result.samples.size() << " samples -> " << output << '\n';
  return result.failures.empty() ? 0 : 3;
}

inline int cmd_train(const json& cfg, const std::string& input,
                     const std::string& checkpoint_dir, std::ostream& out) {
  auto corpus = load_corpus(input);
  const json& m = cfg.at("model");
  auto h = make_model_handle(
      corpus, plan_mode_from_string(m.at("mode").get<std::string>()),
      backbone_from(m), mapnet_from(m), m.at("k_concepts").get<int>(),
      cfg.at("seed").get<uint64_t>(),
      std::make_shared<SyntheticImageEncoder>(m.at("feature_dim").get<int>()),
      detector_from(m));
  auto result = train(corpus, h, train_from(cfg), checkpoint_dir);
  write_manifest(checkpoint_dir + "/manifest.json", "train", cfg,
                 {{"corpus", input}},
                 {{"checkpoints", result.checkpoint_dirs},
                  {"final_loss", result.loss_curve.back()},
                  {"truncated_rows", result.truncated_rows}});
  out << "trained " << result.loss_curve.size() << " steps, final loss "
      << result.loss_curve.back() << " -> " << checkpoint_dir << '\n';
  return 0;
}

inline int cmd_generate(const json& cfg, const std::string& checkpoint,
                        const std::string& input, const std::string& output,
                        bool refined, int extend_iterations,
                        std::ostream& out) {
  const json& m = cfg.at("model");
  auto h = load_checkpoint(
      checkpoint,
      std::make_shared<SyntheticImageEncoder>(m.at("feature_dim").get<int>()),
      detector_from(m));
  auto corpus = load_corpus(input);
  auto dcfg = decode_from(cfg);
  control::RefinementConfig rcfg;
  rcfg.strict_full_phrase = cfg.at("refine").at("strict_full_phrase").get<bool>();
  std::ofstream of(output);
  if (!of) throw IoError("cannot write output: " + output);
  for (auto& s : corpus) {
    GenerationTrace trace;
    if (extend_iterations > 0) {
      trace = control::generate_extended(s.image_sequence, h, dcfg,
                                         extend_iterations);
    } else if (refined) {
      trace = control::generate_refined(s.image_sequence, h, dcfg, rcfg).trace;
    } else {
      trace = generate(s.image_sequence, h, dcfg);
    }
    of << trace_to_json(s.image_sequence.sequence_id, trace).dump() << '\n';
  }
  write_manifest(output + ".manifest.json", "generate", cfg,
                 {{"checkpoint", checkpoint}, {"corpus", input}},
                 {{"traces", output},
                  {"samples", corpus.size()},
                  {"refined", refined},
                  {"extend_iterations", extend_iterations}});
  out << "generated " << corpus.size() << " traces -> " << output << '\n';
  return 0;
}

inline int cmd_evaluate(const json& cfg, const std::string& input,
                        const std::string& report_path, std::ostream& out) {
  auto corpus = load_corpus(input);
  const json& m = cfg.at("model");
  auto detector = detector_from(m);
  int k = m.at("k_concepts").get<int>();
  std::vector<metrics::EvalSample> samples;
  for (auto& s : corpus) {
    metrics::EvalSample e;
    e.sequence_id = s.image_sequence.sequence_id;
    e.story = s.story;
    e.blueprint = s.blueprint;
    if (k > 0) e.concepts = detect_concepts(s.image_sequence, *detector, k);
    samples.push_back(std::move(e));
  }
  metrics::EvaluateOptions opts;
  opts.repetition.per_sentence =
      cfg.at("evaluate").at("per_sentence_repetition").get<bool>();
  opts.faithfulness.f1_threshold =
      cfg.at("evaluate").at("faithfulness_f1_threshold").get<double>();
  for (auto& e : cfg.at("evaluate").at("external"))
    opts.external.push_back(e.get<std::string>());
  OverlapQuestionAnswerer qa;
  auto report = metrics::evaluate(samples, &qa, {}, opts);
  if (report_path.empty()) {
    out << report.to_json().dump(2) << '\n';
  } else {
    std::ofstream of(report_path);
    if (!of) throw IoError("cannot write report: " + report_path);
    of << report.to_json().dump(2) << '\n';
    write_manifest(report_path + ".manifest.json", "evaluate", cfg,
                   {{"corpus", input}}, {{"report", report_path}});
    out << "report -> " << report_path << '\n';
  }
  return 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out,
               std::ostream& err) {
  CLI::App app{"Blueprint-planned visual storytelling toolkit"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file")->configurable(false);

  // flag overrides (flags win over the config file)
  std::optional<uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<int> k_concepts, beam_size, max_iterations, max_steps,
      batch_size, parallelism;
  std::optional<double> learning_rate;
  app.add_option("--seed", seed, "Random seed");

  std::string input, output, checkpoint_dir;
  bool refined = false;
  int extend_iterations = 0;

  auto* stats = app.add_subcommand("stats", "Corpus statistics");
  stats->add_option("--input", input, "Corpus JSONL")->required();

  auto* annotate = app.add_subcommand("annotate", "Blueprint annotation");
  annotate->add_option("--input", input, "Corpus JSONL")->required();
  annotate->add_option("--output", output, "Annotated corpus JSONL")->required();
  annotate->add_option("--parallelism", parallelism, "Worker threads");

  auto* train_cmd = app.add_subcommand("train", "Train a story model");
  train_cmd->add_option("--input", input, "Annotated corpus JSONL")->required();
  train_cmd->add_option("--checkpoint-dir", checkpoint_dir, "Checkpoint root")
      ->required();
  train_cmd->add_option("--mode", mode, "top_down or iterative");
  train_cmd->add_option("--max-steps", max_steps, "Training steps");
  train_cmd->add_option("--batch-size", batch_size, "Batch size");
  train_cmd->add_option("--learning-rate", learning_rate, "Learning rate");
  train_cmd->add_option("--k-concepts", k_concepts, "Concepts per image");

  auto* gen = app.add_subcommand("generate", "Generate stories");
  gen->add_option("--checkpoint", checkpoint_dir, "Checkpoint dir")->required();
  gen->add_option("--input", input, "Corpus JSONL (image sequences)")
      ->required();
  gen->add_option("--output", output, "Trace JSONL")->required();
  gen->add_option("--beam-size", beam_size, "Beam size");
  gen->add_option("--max-iterations", max_iterations, "Iteration cap");
  gen->add_flag("--refined", refined, "Refine blueprints against concepts");
  gen->add_option("--extend", extend_iterations,
                  "Extended generation with this iteration cap");

  auto* eval = app.add_subcommand("evaluate", "Score stories");
  eval->add_option("--input", input, "Corpus JSONL")->required();
  eval->add_option("--report", output, "Report JSON path (default stdout)");

  // --config/--seed may follow the subcommand name
  for (auto* sc : {stats, annotate, train_cmd, gen, eval}) sc->fallthrough();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    json cfg = load_config(config_path);
    if (seed) cfg["seed"] = *seed;
    if (mode) cfg["model"]["mode"] = *mode;
    if (k_concepts) cfg["model"]["k_concepts"] = *k_concepts;
    if (beam_size) cfg["decode"]["beam_size"] = *beam_size;
    if (max_iterations) cfg["decode"]["max_iterations"] = *max_iterations;
    if (max_steps) cfg["train"]["max_steps"] = *max_steps;
    if (batch_size) cfg["train"]["batch_size"] = *batch_size;
    if (learning_rate) cfg["train"]["learning_rate"] = *learning_rate;
    if (parallelism) cfg["annotate"]["parallelism"] = *parallelism;
    validate_config(cfg, default_config());

    if (stats->parsed()) return detail::cmd_stats(cfg, input, out);
    if (annotate->parsed())
      return detail::cmd_annotate(cfg, input, output, out, err);
    if (train_cmd->parsed())
      return detail::cmd_train(cfg, input, checkpoint_dir, out);
    if (gen->parsed())
      return detail::cmd_generate(cfg, checkpoint_dir, input, output, refined,
                                  extend_iterations, out);
    if (eval->parsed()) return detail::cmd_evaluate(cfg, input, output, out);
    err << "error: no command\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace storyplan::cli
