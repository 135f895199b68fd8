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
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "storyplan/corpus.hpp"
#include "storyplan/errors.hpp"
#include "storyplan/nn.hpp"
#include "storyplan/tokenizer.hpp"

namespace storyplan {

// ---------------------------------------------------------------------------
// Frozen adapters: image encoder and concept detector
// ---------------------------------------------------------------------------

struct ImageFeatures {
  nn::Mat vectors;  // k × d_img, one row per image
};

class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  virtual Eigen::VectorXd encode(const ImageRef& image) = 0;
  virtual int feature_dim() const = 0;
  /// Hash over frozen weights; must be invariant across training.
  virtual uint64_t parameter_hash() const = 0;
};

struct ScoredConcept {
  std::string label;
  double confidence = 0.0;
};

class ConceptDetector {
 public:
  virtual ~ConceptDetector() = default;
  /// All concepts the detector assigns to this image, unordered.
  virtual std::vector<ScoredConcept> detect(const ImageRef& image) = 0;
  virtual uint64_t parameter_hash() const = 0;
};

/// Deterministic stand-in for a frozen pretrained encoder: a fixed random
/// projection of a byte-hash embedding of the image locator (or file bytes
/// when the uri resolves to a local file).
class SyntheticImageEncoder : public ImageEncoder {
 public:
  explicit SyntheticImageEncoder(int feature_dim = 128, uint64_t seed = 7)
      : dim_(feature_dim) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    projection_ = nn::Mat(dim_, 64);
    for (Eigen::Index i = 0; i < projection_.rows(); ++i)
      for (Eigen::Index j = 0; j < projection_.cols(); ++j)
        projection_(i, j) = d(rng);
  }

  Eigen::VectorXd encode(const ImageRef& image) override {
    std::string payload = read_payload(image);
    Eigen::VectorXd h(64);
    uint64_t state = 1469598103934665603ull;
    for (int j = 0; j < 64; ++j) {
      for (unsigned char c : payload) {
        state ^= c + static_cast<uint64_t>(j) * 0x9e3779b97f4a7c15ull;
        state *= 1099511628211ull;
      }
      h(j) = static_cast<double>(state % 2000) / 1000.0 - 1.0;
    }
    return projection_ * h;
  }

  int feature_dim() const override { return dim_; }

  uint64_t parameter_hash() const override {
    return nn::hash_matrix(projection_);
  }

 private:
  static std::string read_payload(const ImageRef& image) {
    std::ifstream in(image.uri, std::ios::binary);
    if (in) {
      std::string bytes((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
      if (!bytes.empty()) return bytes;
    }
    if (image.uri.empty())
      throw FeatureError("unresolvable image uri for image " + image.id);
    return image.uri;
  }

  int dim_;
  nn::Mat projection_;
};

/// Deterministic concept tagger over a fixed vocabulary; confidences derive
/// from a hash of (image uri, concept).
class SyntheticConceptDetector : public ConceptDetector {
 public:
  explicit SyntheticConceptDetector(std::vector<std::string> vocabulary,
                                    uint64_t seed = 11)
      : vocab_(std::move(vocabulary)), seed_(seed) {}

  static SyntheticConceptDetector with_default_vocabulary(uint64_t seed = 11) {
    return SyntheticConceptDetector(
        {"dog",    "park",   "ball",   "family", "market", "beach",
         "friend", "cake",   "garden", "mountain", "river", "picnic",
         "sunset", "camera", "museum", "bridge", "flower", "crowd",
         "boat",   "festival"},
        seed);
  }

  std::vector<ScoredConcept> detect(const ImageRef& image) override {
    std::vector<ScoredConcept> out;
    for (auto& c : vocab_) {
      uint64_t h = seed_;
      for (unsigned char ch : image.uri) h = h * 1099511628211ull + ch;
      for (unsigned char ch : c) h = h * 1099511628211ull + ch;
      out.push_back({c, static_cast<double>(h % 10000) / 10000.0});
    }
    return out;
  }

  uint64_t parameter_hash() const override {
    uint64_t h = seed_;
    for (auto& c : vocab_)
      for (unsigned char ch : c) h = h * 1099511628211ull + ch;
    return h;
  }

 private:
  std::vector<std::string> vocab_;
  uint64_t seed_;
};

/// Reads per-image concepts from a JSON file: {"image_id": [["concept",
/// confidence], ...], ...}.
class FileConceptDetector : public ConceptDetector {
 public:
  explicit FileConceptDetector(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open concept file: " + path);
    json j;
    in >> j;
    for (auto& [id, arr] : j.items()) {
      std::vector<ScoredConcept> v;
      for (auto& entry : arr)
        v.push_back({entry.at(0).get<std::string>(),
                     entry.at(1).get<double>()});
      table_[id] = std::move(v);
    }
  }

  std::vector<ScoredConcept> detect(const ImageRef& image) override {
    auto it = table_.find(image.id);
    if (it == table_.end())
      throw FeatureError("no concepts for image " + image.id);
    return it->second;
  }

  uint64_t parameter_hash() const override {
    uint64_t h = 1469598103934665603ull;
    for (auto& [id, v] : table_)
      for (auto& c : v)
        for (unsigned char ch : c.label) h = h * 1099511628211ull + ch;
    return h;
  }

 private:
  std::map<std::string, std::vector<ScoredConcept>> table_;
};

// ---------------------------------------------------------------------------
// Feature extraction and concept detection
// ---------------------------------------------------------------------------

inline ImageFeatures extract_features(const ImageSequence& images,
                                      ImageEncoder& encoder) {
  ImageFeatures f;
  f.vectors = nn::Mat(static_cast<Eigen::Index>(images.size()),
                      encoder.feature_dim());
  for (size_t i = 0; i < images.images.size(); ++i) {
    try {
      f.vectors.row(static_cast<Eigen::Index>(i)) =
          encoder.encode(images.images[i]).transpose();
    } catch (const FeatureError&) {
      throw;
    } catch (const std::exception& e) {
      throw FeatureError("image " + images.images[i].id + ": " + e.what());
    }
  }
  return f;
}

struct ConceptSet {
  /// Exactly K concepts per image, confidences non-increasing.
  std::vector<std::vector<ScoredConcept>> per_image;

  std::vector<std::string> flattened() const {
    std::vector<std::string> out;
    for (auto& img : per_image)
      for (auto& c : img) out.push_back(c.label);
    return out;
  }
};

/// Top-K per image; ties broken lexicographically on the concept string.
inline ConceptSet detect_concepts(const ImageSequence& images,
                                  ConceptDetector& detector, int k) {
  if (k < 1) throw DomainError("detect_concepts: K must be >= 1");
  ConceptSet cs;
  for (auto& img : images.images) {
    std::vector<ScoredConcept> all;
    try {
      all = detector.detect(img);
    } catch (const FeatureError&) {
      throw;
    } catch (const std::exception& e) {
      throw FeatureError("image " + img.id + ": " + e.what());
    }
    if (static_cast<int>(all.size()) < k)
      throw DomainError("detect_concepts: K=" + std::to_string(k) +
                        " exceeds detector vocabulary for image " + img.id);
    std::sort(all.begin(), all.end(), [](auto& a, auto& b) {
      if (a.confidence != b.confidence) return a.confidence > b.confidence;
      return a.label < b.label;
    });
    all.resize(static_cast<size_t>(k));
    cs.per_image.push_back(std::move(all));
  }
  return cs;
}

// ---------------------------------------------------------------------------
// Concept string grammar: a single flat ⟨SEP⟩-joined list, images in order.
// Per-image grouping is recoverable only via the stored ConceptSet.
// ---------------------------------------------------------------------------

inline std::string build_concept_string(const ConceptSet& concepts) {
  std::vector<std::string> flat = concepts.flattened();
  std::string sep = std::string(" ") + markers::kSep + " ";
  return text::join(flat, sep);
}

inline std::vector<std::string> parse_concept_string(const std::string& s) {
  if (text::trim(s).empty()) return {};
  std::vector<std::string> out;
  for (auto& part :
       text::split(s, std::string(" ") + markers::kSep + " "))
    out.push_back(text::trim(part));
  return out;
}

// ---------------------------------------------------------------------------
// Mapping network F_phi: the only trainable weights in this module
// ---------------------------------------------------------------------------

struct MappingNetworkConfig {
  int input_dim = 128;   // d_img
  int hidden_dim = 128;
  int output_dim = 64;   // d_lm
  int depth = 2;         // feed-forward layers, nonlinearity between
  /// When true the k feature vectors are flattened and mapped jointly; the
  /// default maps each image independently.
  bool joint = false;
  int sequence_length = 5;  // only used by the joint variant
};

class MappingNetwork {
 public:
  MappingNetwork() = default;

  explicit MappingNetwork(const MappingNetworkConfig& cfg) : cfg_(cfg) {
    int in = cfg.joint ? cfg.input_dim * cfg.sequence_length : cfg.input_dim;
    int out = cfg.joint ? cfg.output_dim * cfg.sequence_length : cfg.output_dim;
    int prev = in;
    for (int i = 0; i < cfg.depth; ++i) {
      bool last = (i == cfg.depth - 1);
      int width = last ? out : cfg.hidden_dim;
      weights_.emplace_back("mapnet.w" + std::to_string(i), prev, width);
      biases_.emplace_back("mapnet.b" + std::to_string(i), 1, width);
      prev = width;
    }
  }

  void init(std::mt19937_64& rng) {
    for (auto& w : weights_) w.init_normal(rng, 0.1);
    for (auto& b : biases_) b.value.setZero();
  }

  const MappingNetworkConfig& config() const { return cfg_; }

  std::vector<nn::Parameter*> parameters() {
    std::vector<nn::Parameter*> out;
    for (size_t i = 0; i < weights_.size(); ++i) {
      out.push_back(&weights_[i]);
      out.push_back(&biases_[i]);
    }
    return out;
  }

  /// Forward on the tape: features node (k×d_img) → clues node (k×d_lm).
  int forward(nn::Graph& g, int features) {
    if (g.val(features).cols() != expected_input_cols())
      throw ConfigError("mapping network: feature dim " +
                        std::to_string(g.val(features).cols()) +
                        " != configured " +
                        std::to_string(expected_input_cols()));
    int x = features;
    for (size_t i = 0; i < weights_.size(); ++i) {
      x = g.add_rowvec(g.matmul(x, g.param(weights_[i])), g.param(biases_[i]));
      if (i + 1 < weights_.size()) x = g.tanh_(x);
    }
    return x;
  }

  nn::Mat map_plain(const nn::Mat& features) {
    nn::Graph g;
    return g.val(forward(g, g.input(features)));
  }

 private:
  Eigen::Index expected_input_cols() const {
    return cfg_.joint ? cfg_.input_dim * cfg_.sequence_length : cfg_.input_dim;
  }

  MappingNetworkConfig cfg_;
  std::vector<nn::Parameter> weights_;
  std::vector<nn::Parameter> biases_;
};

/// Eq-style clue mapping: k image feature vectors → k clue vectors of d_lm.
inline nn::Mat map_to_clues(const ImageFeatures& features, MappingNetwork& net) {
  return net.map_plain(features.vectors);
}

// ---------------------------------------------------------------------------
// Full prefix assembly
// ---------------------------------------------------------------------------

struct VisualPrefix {
  nn::Mat clues;               // k × d_lm
  nn::Mat concept_embeddings;  // n_tokens × d_lm
  nn::Mat combined;            // (k + n_tokens) × d_lm, clues first
  ConceptSet concepts;
  std::string concept_string;
  std::vector<int> concept_token_ids;
};

/// combined = [F_phi(encoder(images)) ; embed(concept tokens)], clue block
/// strictly first. K = 0 disables the concept block.
inline VisualPrefix build_visual_prefix(const ImageSequence& images,
                                        ImageEncoder& encoder,
                                        MappingNetwork& net,
                                        ConceptDetector& detector,
                                        const Tokenizer& tokenizer,
                                        const nn::Mat& token_embedding,
                                        int k_concepts) {
  VisualPrefix vp;
  ImageFeatures feats = extract_features(images, encoder);
  vp.clues = map_to_clues(feats, net);
  if (k_concepts > 0) {
    vp.concepts = detect_concepts(images, detector, k_concepts);
    vp.concept_string = build_concept_string(vp.concepts);
    vp.concept_token_ids = tokenizer.encode(vp.concept_string);
  }
  vp.concept_embeddings =
      nn::Mat(static_cast<Eigen::Index>(vp.concept_token_ids.size()),
              token_embedding.cols());
  for (size_t i = 0; i < vp.concept_token_ids.size(); ++i)
    vp.concept_embeddings.row(static_cast<Eigen::Index>(i)) =
        token_embedding.row(vp.concept_token_ids[i]);
  vp.combined = nn::Mat(vp.clues.rows() + vp.concept_embeddings.rows(),
                        vp.clues.cols());
  vp.combined.topRows(vp.clues.rows()) = vp.clues;
  vp.combined.bottomRows(vp.concept_embeddings.rows()) = vp.concept_embeddings;
  return vp;
}

}  // namespace storyplan
