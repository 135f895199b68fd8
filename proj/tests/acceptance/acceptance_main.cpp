// End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
// process exits with the number of failed checks. The final check needs a
// local dataset and is skipped unless STORYPLAN_VIST_DIR is set.

#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <vector>

#include "storyplan/annotation.hpp"
#include "storyplan/control.hpp"
#include "storyplan/metrics.hpp"
#include "storyplan/story_models.hpp"

#include "../support/test_support.hpp"

using namespace storyplan;
using nn::Mat;

namespace {

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

std::vector<std::string> whitespace_tokens(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

/// Multiset token overlap in [0, 1]; 1.0 iff the token streams are equal.
double token_overlap(const std::string& a, const std::string& b) {
  auto ta = whitespace_tokens(a);
  auto tb = whitespace_tokens(b);
  if (ta.empty() && tb.empty()) return 1.0;
  std::map<std::string, int> counts;
  for (auto& t : ta) counts[t]++;
  int shared = 0;
  for (auto& t : tb) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++shared;
    }
  }
  return static_cast<double>(shared) /
         static_cast<double>(std::max(ta.size(), tb.size()));
}

double oracle_intra(const std::vector<std::string>& toks) {
  if (toks.size() < 3) return 0.0;
  std::map<std::vector<std::string>, int> counts;
  for (size_t i = 0; i + 2 < toks.size(); ++i)
    counts[{toks[i], toks[i + 1], toks[i + 2]}]++;
  double total = static_cast<double>(toks.size() - 2);
  return (total - static_cast<double>(counts.size())) / total;
}

double oracle_inter(const std::vector<std::vector<std::string>>& streams) {
  std::vector<std::set<std::vector<std::string>>> sets;
  for (auto& toks : streams) {
    std::set<std::vector<std::string>> s;
    for (size_t i = 0; i + 2 < toks.size(); ++i)
      s.insert({toks[i], toks[i + 1], toks[i + 2]});
    sets.push_back(std::move(s));
  }
  double total = 0;
  for (size_t i = 0; i < sets.size(); ++i) {
    if (sets[i].empty()) continue;
    size_t shared = 0;
    for (auto& t : sets[i])
      for (size_t j = 0; j < sets.size(); ++j)
        if (j != i && sets[j].count(t)) {
          ++shared;
          break;
        }
    total += static_cast<double>(shared) / static_cast<double>(sets[i].size());
  }
  return total / static_cast<double>(sets.size());
}

Story story_from_tokens(const std::vector<std::string>& toks) {
  Story s;
  s.sentences = {text::join(toks, " ") + "."};
  return s;
}

/// Short two-sentence samples that a tiny model can memorize.
std::vector<StorySample> make_short_corpus(size_t n) {
  std::vector<StorySample> out;
  for (size_t i = 0; i < n; ++i) {
    StorySample s;
    s.image_sequence.sequence_id = "short-" + std::to_string(i);
    for (int k = 0; k < 2; ++k) {
      ImageRef img;
      img.id = s.image_sequence.sequence_id + "-img" + std::to_string(k);
      img.uri = "mem://" + img.id;
      s.image_sequence.images.push_back(img);
    }
    std::string name = test_support::names()[i % 10];
    std::string place = test_support::places()[(i * 3 + 1) % 10];
    std::string obj = test_support::objects()[(i * 7 + 2) % 10];
    s.story.sentences = {name + " walked to the " + place + ".",
                         name + " carried the " + obj + "."};
    s.split = Split::train;
    out.push_back(std::move(s));
  }
  return out;
}

ModelHandle tiny_handle(const std::vector<StorySample>& corpus, PlanMode mode,
                        int d_model = 32) {
  TransformerConfig bcfg;
  bcfg.d_model = d_model;
  bcfg.n_heads = 2;
  bcfg.d_ffn = 2 * d_model;
  bcfg.enc_layers = 1;
  bcfg.dec_layers = 1;
  bcfg.max_len = 512;
  MappingNetworkConfig mcfg;
  mcfg.input_dim = 16;
  mcfg.hidden_dim = d_model;
  return make_model_handle(corpus, mode, bcfg, mcfg, /*k_concepts=*/2,
                           /*seed=*/7,
                           std::make_shared<SyntheticImageEncoder>(16));
}

struct CheckResult {
  bool pass = false;
  bool skipped = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Check 1: repetition metrics equal an independent brute-force counter
// ---------------------------------------------------------------------------

CheckResult check_metric_oracles() {
  std::mt19937_64 rng(101);
  std::vector<std::vector<std::string>> group;
  for (int trial = 0; trial < 1000; ++trial) {
    auto toks = test_support::random_token_stream(rng, 60);
    if (metrics::intra_repetition(story_from_tokens(toks)) !=
        oracle_intra(toks))
      return {false, false, "intra mismatch at trial " + std::to_string(trial)};
    group.push_back(toks);
    if (group.size() == 2 + trial % 4) {
      std::vector<Story> stories;
      for (auto& g : group) stories.push_back(story_from_tokens(g));
      if (metrics::inter_repetition(stories) != oracle_inter(group))
        return {false, false,
                "inter mismatch at trial " + std::to_string(trial)};
      group.clear();
    }
  }
  return {true, false, "1000 streams, exact equality"};
}

// ---------------------------------------------------------------------------
// Check 2: annotation pipeline invariants on a 50-story corpus
// ---------------------------------------------------------------------------

CheckResult check_annotation_invariants(
    const std::vector<StorySample>& annotated, const AdapterBundle& adapters) {
  size_t pairs_total = 0;
  for (auto& s : annotated) {
    auto pairs = s.blueprint->flattened();
    pairs_total += pairs.size();
    // re-running both filters is the identity
    auto refiltered = filter_redundant(pairs);
    refiltered = round_trip_filter(refiltered, s.story,
                                   *adapters.question_answerer, adapters.match);
    if (refiltered.size() != pairs.size())
      return {false, false, "re-filter dropped pairs on " +
                                s.image_sequence.sequence_id};
    for (auto& p : pairs) {
      std::string na = text::normalize_answer(p.answer);
      std::string nq = text::normalize_answer(p.question);
      if (!na.empty() && text::contains_substring(nq, na))
        return {false, false, "answer leaked into question: " + p.answer};
    }
  }
  if (pairs_total == 0) return {false, false, "no pairs produced"};
  return {true, false, std::to_string(pairs_total) + " pairs, filters stable"};
}

// ---------------------------------------------------------------------------
// Check 3: serialization round trips and step expansion algebra
// ---------------------------------------------------------------------------

CheckResult check_serialization() {
  std::mt19937_64 rng(103);
  for (int trial = 0; trial < 1000; ++trial) {
    auto [bp, st] = test_support::random_blueprint_story(rng);
    auto parsed = parse_topdown(serialize_topdown(bp, st));
    if (!parsed.issues.empty())
      return {false, false, "parse issues at trial " + std::to_string(trial)};
    if (parsed.story.sentences != st.sentences ||
        parsed.blueprint.segment_count() != bp.segment_count())
      return {false, false, "round trip failed at " + std::to_string(trial)};
    auto want = bp.flattened();
    auto got = parsed.blueprint.flattened();
    if (want.size() != got.size())
      return {false, false, "pair count drift at " + std::to_string(trial)};
    for (size_t i = 0; i < want.size(); ++i)
      if (serialization::sanitize(want[i].answer) != got[i].answer ||
          serialization::sanitize(want[i].question) + "?" != got[i].question)
        return {false, false, "pair text drift at " + std::to_string(trial)};
  }
  for (int trial = 0; trial < 1000; ++trial) {
    auto [bp, st] = test_support::random_blueprint_story(rng);
    StorySample s;
    s.story = st;
    s.blueprint = bp;
    auto steps = expand_iterative_samples(s);
    if (steps.size() != st.sentences.size() + 1)
      return {false, false, "step count at trial " + std::to_string(trial)};
    std::string accumulated;
    for (size_t i = 0; i < steps.size(); ++i) {
      std::string want_ctx =
          i == 0 ? std::string(markers::kStart)
                 : serialization::squeeze_spaces(
                       std::string(markers::kContext) + " " + accumulated);
      if (steps[i].context != want_ctx)
        return {false, false, "context algebra at " + std::to_string(trial)};
      if (!accumulated.empty()) accumulated += " ";
      accumulated += steps[i].target;
    }
    if (steps.back().target != markers::kEnd)
      return {false, false, "missing end step at " + std::to_string(trial)};
  }
  return {true, false, "2000 randomized cases"};
}

// ---------------------------------------------------------------------------
// Check 4: context positions contribute exactly zero loss
// ---------------------------------------------------------------------------

CheckResult check_loss_masking(const std::vector<StorySample>& annotated) {
  std::vector<StorySample> probe(annotated.begin(), annotated.begin() + 3);
  auto h = tiny_handle(probe, PlanMode::iterative, 16);
  size_t truncations = 0;
  TrainConfig tcfg;
  auto rows = training_detail::build_rows(h, probe, tcfg, &truncations);
  size_t masked_positions = 0;
  for (auto& row : rows) {
    auto pd = h.prepare_prefix(probe[row.sample_index].image_sequence);
    auto pl = row_loss(h, pd, row, /*do_backward=*/false);
    for (size_t i = 0; i < pl.losses.size(); ++i)
      if (pl.mask[i] == 0.0) {
        ++masked_positions;
        if (pl.losses[i] != 0.0)
          return {false, false, "nonzero loss at masked position"};
      }
    if (row.context_ids.empty()) continue;
    // perturbing labels at masked positions must leave the loss bit-identical
    std::vector<int> stream;
    stream.push_back(Tokenizer::kBos);
    stream.insert(stream.end(), row.context_ids.begin(),
                  row.context_ids.end());
    stream.insert(stream.end(), row.target_ids.begin(), row.target_ids.end());
    std::vector<int> labels(stream.begin() + 1, stream.end());
    labels.push_back(Tokenizer::kEos);
    std::vector<double> mask(labels.size(), 1.0);
    for (size_t i = 0; i < row.context_ids.size(); ++i) mask[i] = 0.0;
    auto eval = [&](const std::vector<int>& lab) {
      nn::Graph g;
      int logits = h.model.decode_logits(
          g, h.model.encode(g, h.prefix_node(g, pd)), stream);
      return g.val(g.cross_entropy_rows(logits, lab, mask).loss_id)(0, 0);
    };
    double base = eval(labels);
    auto perturbed = labels;
    for (size_t i = 0; i < row.context_ids.size(); ++i)
      perturbed[i] = (perturbed[i] + 1) % h.tokenizer.size();
    if (eval(perturbed) != base)
      return {false, false, "masked labels changed the loss"};
  }
  if (masked_positions == 0) return {false, false, "no masked positions"};
  return {true, false, std::to_string(rows.size()) + " rows, " +
                           std::to_string(masked_positions) +
                           " masked positions all exactly zero"};
}

// ---------------------------------------------------------------------------
// Check 5: encoder/detector stay frozen; mapping-network gradient is exact
// ---------------------------------------------------------------------------

CheckResult check_frozen_contract(const std::vector<StorySample>& annotated) {
  std::vector<StorySample> corpus(annotated.begin(), annotated.begin() + 2);
  auto h = tiny_handle(corpus, PlanMode::top_down, 16);
  uint64_t enc_before = h.encoder->parameter_hash();
  uint64_t det_before = h.detector->parameter_hash();
  TrainConfig tcfg;
  tcfg.learning_rate = 1e-3;
  tcfg.batch_size = 2;
  tcfg.max_steps = 100;
  tcfg.max_target_tokens = 96;
  train_topdown(corpus, h, tcfg);
  if (h.encoder->parameter_hash() != enc_before)
    return {false, false, "image encoder hash changed"};
  if (h.detector->parameter_hash() != det_before)
    return {false, false, "concept detector hash changed"};

  // reduced-dimension mapping network against central finite differences
  MappingNetworkConfig mcfg;
  mcfg.input_dim = 4;
  mcfg.hidden_dim = 4;
  mcfg.output_dim = 6;
  MappingNetwork net(mcfg);
  std::mt19937_64 rng(55);
  net.init(rng);
  Mat X = Mat::Random(3, 4);
  auto build = [&](nn::Graph& g, bool backward) {
    int loss = g.sum_all(g.tanh_(net.forward(g, g.input(X))));
    if (backward) g.backward(loss);
    return g.val(loss)(0, 0);
  };
  auto params = net.parameters();
  for (auto* p : params) p->zero_grad();
  {
    nn::Graph g;
    build(g, true);
  }
  const double fd_h = 1e-6;
  double worst = 0.0;
  for (auto* p : params) {
    Mat analytic = p->grad;
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
        double orig = p->value(i, j);
        p->value(i, j) = orig + fd_h;
        nn::Graph gp;
        double lp = build(gp, false);
        p->value(i, j) = orig - fd_h;
        nn::Graph gm;
        double lm = build(gm, false);
        p->value(i, j) = orig;
        double numeric = (lp - lm) / (2 * fd_h);
        worst = std::max(worst, std::abs(analytic(i, j) - numeric) /
                                    std::max(1.0, std::abs(numeric)));
      }
  }
  if (worst >= 1e-4)
    return {false, false,
            "gradient relative error " + std::to_string(worst)};
  std::ostringstream d;
  d << "hashes stable over 100 steps; max gradient error " << worst;
  return {true, false, d.str()};
}

// ---------------------------------------------------------------------------
// Check 6: tiny models memorize a 10-sample corpus in both modes
// ---------------------------------------------------------------------------

CheckResult check_overfit(const std::vector<StorySample>& corpus,
                          PlanMode mode) {
  auto h = tiny_handle(corpus, mode);
  TrainConfig tcfg;
  tcfg.learning_rate = 3e-3;
  tcfg.batch_size = mode == PlanMode::top_down ? 10 : 15;
  tcfg.max_steps = 100;
  tcfg.max_target_tokens = 512;
  DecodeConfig dcfg;
  dcfg.beam_size = 2;
  dcfg.max_output_tokens = 200;
  dcfg.max_iterations = 5;  // above k=2 so a clean stop is the model's doing

  int steps_used = 0;
  size_t best = 0;
  for (int chunk = 0; chunk < 5; ++chunk) {  // 5 x 100 = 500 step budget
    train(corpus, h, tcfg);
    steps_used += tcfg.max_steps;
    size_t good = 0;
    for (auto& s : corpus) {
      auto trace = generate(s.image_sequence, h, dcfg);
      bool ok = token_overlap(trace.story.joined(), s.story.joined()) >= 0.9;
      if (mode == PlanMode::iterative) {
        // must stop by emitting the end marker after exactly k sentences
        ok = ok && trace.story.sentences.size() == s.story.sentences.size() &&
             trace.raw_text.find(markers::kEnd) != std::string::npos &&
             trace.flags.empty();
      }
      if (ok) ++good;
    }
    best = std::max(best, good);
    if (good >= 8)
      return {true, false,
              std::to_string(good) + "/10 after " +
                  std::to_string(steps_used) + " steps"};
  }
  return {false, false,
          "only " + std::to_string(best) + "/10 within 500 steps"};
}

// ---------------------------------------------------------------------------
// Check 7: faithfulness bounds and blueprint/story pairing signal
// ---------------------------------------------------------------------------

CheckResult check_faithfulness(const std::vector<StorySample>& annotated) {
  for (auto& s : annotated) {
    auto oracle = OracleStubAnswerer::from_blueprint(*s.blueprint);
    if (metrics::faithfulness(*s.blueprint, s.story, oracle) != 100.0)
      return {false, false, "verbatim oracle below 100"};
    FixedAnswerStub empty("");
    if (metrics::faithfulness(*s.blueprint, s.story, empty) != 0.0)
      return {false, false, "empty-answer stub above 0"};
  }
  OverlapQuestionAnswerer qa;
  double own = 0.0, shuffled = 0.0;
  for (size_t i = 0; i < annotated.size(); ++i) {
    const auto& s = annotated[i];
    const auto& other = annotated[(i + 1) % annotated.size()];
    own += metrics::faithfulness(*s.blueprint, s.story, qa);
    shuffled += metrics::faithfulness(*other.blueprint, s.story, qa);
  }
  own /= static_cast<double>(annotated.size());
  shuffled /= static_cast<double>(annotated.size());
  if (own <= shuffled)
    return {false, false,
            "own " + std::to_string(own) + " <= shuffled " +
                std::to_string(shuffled)};
  std::ostringstream d;
  d << "own blueprints " << own << " > shuffled " << shuffled;
  return {true, false, d.str()};
}

// ---------------------------------------------------------------------------
// Check 8: refinement idempotence and the extension cap
// ---------------------------------------------------------------------------

CheckResult check_control(const std::vector<StorySample>& annotated) {
  std::mt19937_64 rng(108);
  ConceptSet cs;
  cs.per_image.push_back({{"river", 1.0}, {"stone", 1.0}, {"cloud", 1.0}});
  cs.per_image.push_back({{"lamp", 1.0}, {"train", 1.0}});
  auto lexicon = metrics::concept_lexicon(cs);
  for (int trial = 0; trial < 1000; ++trial) {
    auto [bp, st] = test_support::random_blueprint_story(rng);
    auto once = control::refine_blueprint(bp, cs);
    auto twice = control::refine_blueprint(once.kept, cs);
    if (!twice.removed_pairs.empty())
      return {false, false, "not idempotent at trial " + std::to_string(trial)};
    if (once.kept.pair_count() + once.removed_pairs.size() != bp.pair_count())
      return {false, false, "pairs lost at trial " + std::to_string(trial)};
    for (auto& p : once.kept.flattened()) {
      auto head = control::head_noun_lemma(p.answer);
      if (!head.empty() && lexicon.count(head) == 0)
        return {false, false, "non-grounded head survived: " + p.answer};
    }
  }
  std::vector<StorySample> corpus(annotated.begin(), annotated.begin() + 2);
  auto h = tiny_handle(corpus, PlanMode::iterative, 16);
  DecodeConfig dcfg;
  dcfg.beam_size = 1;
  dcfg.max_output_tokens = 40;
  dcfg.max_iterations = 10;
  auto trace =
      control::generate_extended(corpus[0].image_sequence, h, dcfg, 10);
  if (trace.story.sentences.size() > 10)
    return {false, false, "extension exceeded its cap"};
  return {true, false, "1000 refinements; extended run emitted " +
                           std::to_string(trace.story.sentences.size()) +
                           " sentences (cap 10)"};
}

// ---------------------------------------------------------------------------
// Check 9 (optional): dataset statistics from a local corpus
// ---------------------------------------------------------------------------

CheckResult check_dataset_stats() {
  const char* dir = std::getenv("STORYPLAN_VIST_DIR");
  if (!dir)
    return {true, true, "STORYPLAN_VIST_DIR not set"};
  try {
    auto corpus = load_corpus(std::string(dir) + "/train.jsonl");
    auto annotated = annotate_corpus(corpus, AdapterBundle::heuristic(), 8);
    auto stats = compute_stats(annotated.samples);
    if (stats.avg_images_per_sequence != 5.0 ||
        stats.avg_sentences_per_story != 5.0)
      return {false, false, "expected exactly 5.0 images and 5.0 sentences"};
    std::ostringstream d;
    d << "images 5.0, sentences 5.0; tokens/story "
      << stats.avg_tokens_per_story << " (reference 52.3)";
    if (stats.avg_qa_pairs_per_story)
      d << ", pairs/story " << *stats.avg_qa_pairs_per_story
        << " (reference 11.1), tokens/pair "
        << stats.avg_tokens_per_qa_pair.value_or(0.0) << " (reference 10.3)";
    d << "; token drift is informational only";
    return {true, false, d.str()};
  } catch (const std::exception& e) {
    return {false, false, e.what()};
  }
}

}  // namespace

int main() {
  auto adapters = AdapterBundle::heuristic();
  auto annotated_result =
      annotate_corpus(test_support::make_toy_corpus(50), adapters, 4);
  if (!annotated_result.failures.empty()) {
    std::cout << "[setup] FAIL  toy corpus annotation reported failures\n";
    return 1;
  }
  const auto& annotated = annotated_result.samples;
  // determinism across re-runs, byte-for-byte
  auto rerun = annotate_corpus(test_support::make_toy_corpus(50), adapters, 1);
  for (size_t i = 0; i < annotated.size(); ++i)
    if (to_json(annotated[i]).dump() != to_json(rerun.samples[i]).dump()) {
      std::cout << "[setup] FAIL  annotation re-run is not byte-identical\n";
      return 1;
    }
  auto overfit_corpus =
      annotate_corpus(make_short_corpus(10), adapters, 1).samples;

  struct Check {
    std::string name;
    std::function<CheckResult()> run;
  };
  std::vector<Check> checks = {
      {"repetition metrics equal the brute-force trigram oracle",
       [] { return check_metric_oracles(); }},
      {"annotation filters are stable and answers never leak into questions",
       [&] { return check_annotation_invariants(annotated, adapters); }},
      {"plan serialization round-trips and step expansion algebra hold",
       [] { return check_serialization(); }},
      {"context positions carry exactly zero loss and zero signal",
       [&] { return check_loss_masking(annotated); }},
      {"encoder and detector stay frozen; mapping gradient matches FD",
       [&] { return check_frozen_contract(annotated); }},
      {"top-down model memorizes 10 samples within 500 steps",
       [&] { return check_overfit(overfit_corpus, PlanMode::top_down); }},
      {"iterative model memorizes 10 samples and stops after k steps",
       [&] { return check_overfit(overfit_corpus, PlanMode::iterative); }},
      {"faithfulness hits its bounds and prefers matching blueprints",
       [&] { return check_faithfulness(annotated); }},
      {"blueprint refinement is idempotent; story extension respects its cap",
       [&] { return check_control(annotated); }},
      {"dataset statistics match the expected shape (needs local data)",
       [] { return check_dataset_stats(); }},
  };

  int failures = 0;
  for (size_t i = 0; i < checks.size(); ++i) {
    CheckResult r;
    try {
      r = checks[i].run();
    } catch (const std::exception& e) {
      r = {false, false, std::string("exception: ") + e.what()};
    }
    const char* verdict = r.skipped ? "SKIP" : (r.pass ? "PASS" : "FAIL");
    if (!r.pass && !r.skipped) ++failures;
    std::cout << "[" << (i + 1) << "/" << checks.size() << "] " << verdict
              << "  " << checks[i].name;
    if (!r.detail.empty()) std::cout << " — " << r.detail;
    std::cout << "\n";
  }
  std::cout << (failures == 0 ? "ALL CHECKS PASSED" : "FAILURES PRESENT")
            << "\n";
  return failures;
}
