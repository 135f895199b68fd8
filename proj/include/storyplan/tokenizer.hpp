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
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "storyplan/errors.hpp"
#include "storyplan/text.hpp"

namespace storyplan {

/// Serialization markers. Multi-word markers are atomic vocabulary entries.
namespace markers {
inline constexpr const char* kPlan = "Plan:";
inline constexpr const char* kStory = "Story:";
inline constexpr const char* kContext = "Context:";
inline constexpr const char* kNextSentence = "Next Sentence:";
inline constexpr const char* kStart = "⟨START⟩";  // ⟨START⟩
inline constexpr const char* kEnd = "⟨END⟩";      // ⟨END⟩
inline constexpr const char* kSep = "⟨SEP⟩";      // ⟨SEP⟩
}  // namespace markers

/// Word-level vocabulary with structural tokens (<pad>/<unk>/<s>/</s>) and
/// the marker inventory registered exactly once.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;

  Tokenizer() {
    add_token("<pad>");
    add_token("<unk>");
    add_token("<s>");
    add_token("</s>");
    for (const char* m : marker_list()) add_token(m);
  }

  static const std::vector<const char*>& marker_list() {
    static const std::vector<const char*> kMarkers = {
        markers::kPlan,  markers::kStory, markers::kContext,
        markers::kNextSentence, markers::kStart, markers::kEnd,
        markers::kSep};
    return kMarkers;
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }

  int add_token(const std::string& t) {
    auto it = token_to_id_.find(t);
    if (it != token_to_id_.end()) return it->second;
    int id = size();
    token_to_id_[t] = id;
    id_to_token_.push_back(t);
    return id;
  }

  int id_of(const std::string& t) const {
    auto it = token_to_id_.find(t);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool has(const std::string& t) const { return token_to_id_.count(t) > 0; }

  const std::string& token_of(int id) const { return id_to_token_.at(id); }

  /// Splits text into surface tokens; marker strings stay atomic, the rest
  /// uses whitespace-plus-punctuation tokenization.
  static std::vector<std::string> surface_tokens(const std::string& s) {
    std::vector<std::string> out;
    size_t i = 0;
    auto at_boundary = [&](size_t pos) {
      return pos == 0 || std::isspace(static_cast<unsigned char>(s[pos - 1]));
    };
    while (i < s.size()) {
      if (std::isspace(static_cast<unsigned char>(s[i]))) {
        ++i;
        continue;
      }
      bool matched = false;
      if (at_boundary(i)) {
        for (const char* m : marker_list()) {
          size_t len = std::char_traits<char>::length(m);
          if (s.compare(i, len, m) == 0 &&
              (i + len == s.size() ||
               std::isspace(static_cast<unsigned char>(s[i + len])))) {
            out.emplace_back(m);
            i += len;
            matched = true;
            break;
          }
        }
      }
      if (matched) continue;
      // consume one plain token (word or single punctuation char)
      if (text::is_ascii_punct(s[i])) {
        out.push_back(std::string(1, s[i]));
        ++i;
        continue;
      }
      size_t j = i;
      while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j])) &&
             !text::is_ascii_punct(s[j]))
        ++j;
      out.push_back(s.substr(i, j - i));
      i = j;
    }
    return out;
  }

  std::vector<int> encode(const std::string& s) const {
    std::vector<int> ids;
    for (auto& t : surface_tokens(s)) ids.push_back(id_of(t));
    return ids;
  }

  /// Detokenizes with a space between tokens except before punctuation.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kPad || id == kBos || id == kEos) continue;
      const std::string& t = token_of(id);
      bool punct = t.size() == 1 && text::is_ascii_punct(t[0]);
      if (!out.empty() && !punct) out += ' ';
      out += t;
    }
    return out;
  }

  void build_from_texts(const std::vector<std::string>& texts) {
    for (auto& t : texts)
      for (auto& tok : surface_tokens(t)) add_token(tok);
  }

  void save(const std::string& path) const {
    nlohmann::json j;
    j["tokens"] = id_to_token_;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write tokenizer: " + path);
    out << j.dump(2) << '\n';
  }

  static Tokenizer load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read tokenizer: " + path);
    nlohmann::json j;
    in >> j;
    Tokenizer tok;
    auto tokens = j.at("tokens").get<std::vector<std::string>>();
    // structural + marker tokens are already registered; verify prefix match
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (i < static_cast<size_t>(tok.size())) {
        if (tok.token_of(static_cast<int>(i)) != tokens[i])
          throw ParseError("tokenizer file has incompatible special tokens");
      } else {
        tok.add_token(tokens[i]);
      }
    }
    return tok;
  }

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

}  // namespace storyplan
