#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <random>

#include "storyplan/metrics.hpp"
#include "support/test_support.hpp"

using namespace storyplan;

namespace {

Story story_of(std::vector<std::string> sentences) {
  Story s;
  s.sentences = std::move(sentences);
  return s;
}

Story story_from_tokens(const std::vector<std::string>& toks) {
  return story_of({text::join(toks, " ") + "."});
}

// Brute-force trigram oracle, independent of the library implementation.
double oracle_intra(const std::vector<std::string>& toks) {
  if (toks.size() < 3) return 0.0;
  std::map<std::vector<std::string>, int> counts;
  for (size_t i = 0; i + 2 < toks.size(); ++i)
    counts[{toks[i], toks[i + 1], toks[i + 2]}]++;
  double total = static_cast<double>(toks.size() - 2);
  double distinct = static_cast<double>(counts.size());
  return (total - distinct) / total;
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
    for (auto& t : sets[i]) {
      for (size_t j = 0; j < sets.size(); ++j)
        if (j != i && sets[j].count(t)) {
          ++shared;
          break;
        }
    }
    total += static_cast<double>(shared) / static_cast<double>(sets[i].size());
  }
  return total / static_cast<double>(sets.size());
}

ConceptSet concepts_of(std::vector<std::vector<std::string>> per_image) {
  ConceptSet cs;
  for (auto& img : per_image) {
    std::vector<ScoredConcept> v;
    for (auto& c : img) v.push_back({c, 1.0});
    cs.per_image.push_back(std::move(v));
  }
  return cs;
}

}  // namespace

TEST_CASE("intra_repetition hand values") {
  REQUIRE(metrics::intra_repetition(story_of({"The dog."})) == 0.0);
  // 4 trigram occurrences, 2 distinct
  REQUIRE(metrics::intra_repetition(
              story_of({"the dog the dog the dog."})) == Catch::Approx(0.5));
  REQUIRE(metrics::intra_repetition(story_of({"a b c d e."})) == 0.0);
}

TEST_CASE("intra_repetition matches the brute-force oracle") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    auto toks = test_support::random_token_stream(rng, 40);
    REQUIRE(metrics::intra_repetition(story_from_tokens(toks)) ==
            Catch::Approx(oracle_intra(toks)).margin(1e-12));
  }
}

TEST_CASE("per-sentence repetition ignores cross-sentence trigrams") {
  // "a b. c d." has no within-sentence trigrams but joined has "a b c", ...
  Story s = story_of({"a b a.", "b a b."});
  metrics::RepetitionConfig per_sentence{true};
  REQUIRE(metrics::intra_repetition(s, per_sentence) == 0.0);
  REQUIRE(metrics::intra_repetition(s) > 0.0);
}

TEST_CASE("inter_repetition hand values") {
  Story a = story_of({"the dog chased the ball."});
  Story b = story_of({"the dog chased the ball."});
  Story c = story_of({"we sailed across a quiet harbor."});
  REQUIRE(metrics::inter_repetition({a, b}) == Catch::Approx(1.0));
  REQUIRE(metrics::inter_repetition({a, c}) == Catch::Approx(0.0));
  REQUIRE(metrics::inter_repetition({a, b, c}) == Catch::Approx(2.0 / 3.0));
  REQUIRE_THROWS_AS(metrics::inter_repetition({a}), DomainError);
}

TEST_CASE("inter_repetition matches the brute-force oracle") {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    size_t n = 2 + rng() % 4;
    std::vector<std::vector<std::string>> streams;
    std::vector<Story> stories;
    for (size_t i = 0; i < n; ++i) {
      streams.push_back(test_support::random_token_stream(rng, 25));
      stories.push_back(story_from_tokens(streams.back()));
    }
    REQUIRE(metrics::inter_repetition(stories) ==
            Catch::Approx(oracle_inter(streams)).margin(1e-12));
  }
}

TEST_CASE("grounding precision hand value") {
  // content words: dog, chased, ball, park (4); lexicon: dog, ball, park
  Story s = story_of({"The dog chased the ball in the park."});
  auto cs = concepts_of({{"dog", "ball"}, {"park"}});
  auto r = metrics::grounding_precision(s, cs);
  REQUIRE(r.value == Catch::Approx(3.0 / 4.0));
  REQUIRE_FALSE(r.zero_content_warning);
}

TEST_CASE("grounding precision edge cases") {
  auto cs = concepts_of({{"dog"}});
  SECTION("stopword-only story warns and scores zero") {
    auto r = metrics::grounding_precision(story_of({"It is the of."}), cs);
    REQUIRE(r.value == 0.0);
    REQUIRE(r.zero_content_warning);
  }
  SECTION("empty concept set is a domain error") {
    REQUIRE_THROWS_AS(
        metrics::grounding_precision(story_of({"A dog."}), ConceptSet{}),
        DomainError);
  }
  SECTION("plural story word matches singular concept via lemmas") {
    auto r = metrics::grounding_precision(story_of({"Dogs played."}), cs);
    REQUIRE(r.value == Catch::Approx(0.5));
  }
}

TEST_CASE("grounding recall hand value") {
  Story s = story_of({"The dog ran far.", "A crowd cheered loudly."});
  auto cs = concepts_of({{"dog", "beach"}, {"crowd", "sunset"}});
  REQUIRE(metrics::grounding_recall(s, cs) == Catch::Approx(0.5));
}

TEST_CASE("multi-word concept needs all lemmas in one sentence") {
  auto cs = concepts_of({{"sandy beach"}});
  REQUIRE(metrics::grounding_recall(
              story_of({"The sandy beach glowed."}), cs) == 1.0);
  // split across sentences does not count
  REQUIRE(metrics::grounding_recall(
              story_of({"The beach glowed.", "Sandy dunes rose."}), cs) == 0.0);
}

TEST_CASE("faithfulness bounds from stub answerers") {
  Blueprint bp;
  bp.segments.resize(2);
  bp.segments[0].pairs.push_back(
      {"the park", "Where did Mary go?", std::nullopt, SourceKind::generated});
  bp.segments[1].pairs.push_back(
      {"a kite", "What did Mary carry?", std::nullopt, SourceKind::generated});
  Story s = story_of({"Mary went to the park.", "She carried a kite."});

  auto oracle = OracleStubAnswerer::from_blueprint(bp);
  REQUIRE(metrics::faithfulness(bp, s, oracle) == 100.0);

  FixedAnswerStub empty("");
  REQUIRE(metrics::faithfulness(bp, s, empty) == 0.0);

  // one of two recoverable -> 50
  OracleStubAnswerer half(std::map<std::string, std::string>{
      {"Where did Mary go?", "the park"}});
  REQUIRE(metrics::faithfulness(bp, s, half) == 50.0);

  Blueprint none;
  none.segments.resize(2);
  REQUIRE_THROWS_AS(metrics::faithfulness(none, s, oracle), DomainError);
}

TEST_CASE("faithfulness threshold applies token F1") {
  Blueprint bp;
  bp.segments.resize(1);
  bp.segments[0].pairs.push_back(
      {"big red car", "What was it?", std::nullopt, SourceKind::generated});
  Story s = story_of({"It was a big red car."});
  // answer "red car": F1 = 0.8
  OracleStubAnswerer qa(std::map<std::string, std::string>{
      {"What was it?", "red car"}});
  metrics::FaithfulnessConfig strict{0.9};
  metrics::FaithfulnessConfig loose{0.5};
  REQUIRE(metrics::faithfulness(bp, s, qa, loose) == 100.0);
  REQUIRE(metrics::faithfulness(bp, s, qa, strict) == 0.0);
}

TEST_CASE("external metric registry") {
  metrics::ExternalMetricRegistry registry;
  metrics::MetricRun run{{"a story"}, {"a reference"}};
  SECTION("unconfigured metric raises a capability error") {
    REQUIRE_THROWS_MATCHES(
        registry.compute("mauve", run), CapabilityError,
        Catch::Matchers::MessageMatches(
            Catch::Matchers::ContainsSubstring("not configured")));
    REQUIRE(registry.version("mauve") == "unconfigured");
  }
  SECTION("command adapter round trip") {
    registry.register_adapter(
        "mauve", std::make_shared<metrics::CommandMetricAdapter>(
                     "awk 'BEGIN{print 0.42}'", "awk-stub-1"));
    REQUIRE(registry.has("mauve"));
    REQUIRE(registry.compute("mauve", run) == Catch::Approx(0.42));
    REQUIRE(registry.version("mauve") == "awk-stub-1");
  }
}

TEST_CASE("evaluate produces a uniform report") {
  std::vector<metrics::EvalSample> samples;
  metrics::EvalSample a;
  a.sequence_id = "a";
  a.story = story_of({"The dog chased the ball in the park."});
  a.concepts = concepts_of({{"dog", "ball"}, {"park"}});
  Blueprint bp;
  bp.segments.resize(1);
  bp.segments[0].pairs.push_back(
      {"the ball", "What did the dog chase?", std::nullopt,
       SourceKind::generated});
  a.blueprint = bp;
  metrics::EvalSample b;
  b.sequence_id = "b";
  b.story = story_of({"A quiet harbor at dusk."});  // no concepts/blueprint
  samples = {a, b};

  auto qa = OracleStubAnswerer::from_blueprint(bp);
  auto report = metrics::evaluate(samples, &qa);
  REQUIRE(report.corpus_metrics.count("intra_repetition") == 1);
  REQUIRE(report.corpus_metrics.count("inter_repetition") == 1);
  // means run over defining samples only
  REQUIRE(report.corpus_metrics.at("faithfulness") == 100.0);
  REQUIRE(report.corpus_metrics.at("grounding_precision") ==
          Catch::Approx(3.0 / 4.0));
  // per-sample key sets are identical
  REQUIRE(report.per_sample.size() == 2);
  REQUIRE(report.per_sample[0].size() == report.per_sample[1].size());
  for (auto& [k, v] : report.per_sample[0])
    REQUIRE(report.per_sample[1].count(k) == 1);
  // json/csv render
  auto j = report.to_json();
  REQUIRE(j.contains("corpus_metrics"));
  REQUIRE_THAT(report.to_csv(),
               Catch::Matchers::ContainsSubstring("intra_repetition"));
  REQUIRE_THROWS_AS(metrics::evaluate({}, nullptr), DomainError);
}

TEST_CASE("evaluate single sample omits inter repetition") {
  metrics::EvalSample a;
  a.sequence_id = "a";
  a.story = story_of({"A dog ran."});
  auto report = metrics::evaluate({a}, nullptr);
  REQUIRE(report.corpus_metrics.count("inter_repetition") == 0);
}
