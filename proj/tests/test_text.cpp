#include <catch2/catch_amalgamated.hpp>

#include "storyplan/text.hpp"

using namespace storyplan;

TEST_CASE("tokenize splits words and punctuation") {
  auto toks = text::tokenize("Mary went, quickly!");
  REQUIRE(toks == std::vector<std::string>{"Mary", "went", ",", "quickly", "!"});
}

TEST_CASE("tokenize keeps multi-byte markers intact") {
  auto toks = text::tokenize("a ⟨SEP⟩ b");
  REQUIRE(toks == std::vector<std::string>{"a", "⟨SEP⟩", "b"});
}

TEST_CASE("normalize_answer strips articles and punctuation") {
  REQUIRE(text::normalize_answer("The  beach!") == "beach");
  REQUIRE(text::normalize_answer("a Dog") == "dog");
}

TEST_CASE("token_f1") {
  REQUIRE(text::token_f1("the beach", "beach") == 1.0);
  REQUIRE(text::token_f1("red car", "blue boat") == 0.0);
  REQUIRE(text::token_f1("big red car", "red car") ==
          Catch::Approx(2.0 * (2.0 / 2.0) * (2.0 / 3.0) /
                        ((2.0 / 2.0) + (2.0 / 3.0))));
}

TEST_CASE("lemma strips common suffixes") {
  REQUIRE(text::lemma("apples") == "apple");
  REQUIRE(text::lemma("cherries") == "cherry");
  REQUIRE(text::lemma("Mary's") == "mary");
  REQUIRE(text::lemma("walking") == "walk");
  REQUIRE(text::lemma("chased") == "chas");  // naive stemmer, documented
}

TEST_CASE("content_words drops stopwords") {
  auto w = text::content_words("The family bought apples");
  REQUIRE(w == std::vector<std::string>{"family", "bought", "apples"});
}
