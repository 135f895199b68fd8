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
#include <cmath>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "storyplan/errors.hpp"
#include "storyplan/nn.hpp"

namespace storyplan {

/// Backbone size is configuration; the defaults fit desk-scale CPU runs.
struct TransformerConfig {
  int d_model = 64;
  int n_heads = 4;
  int d_ffn = 128;
  int enc_layers = 1;
  int dec_layers = 2;
  int vocab = 0;
  int max_len = 384;     // decoder positions
  int max_prefix = 96;   // encoder (visual prefix) positions
};

namespace detail {

struct AttentionParams {
  nn::Parameter wq, wk, wv, wo;
  AttentionParams() = default;
  AttentionParams(const std::string& prefix, int d)
      : wq(prefix + ".wq", d, d),
        wk(prefix + ".wk", d, d),
        wv(prefix + ".wv", d, d),
        wo(prefix + ".wo", d, d) {}
  void collect(std::vector<nn::Parameter*>& out) {
    out.push_back(&wq);
    out.push_back(&wk);
    out.push_back(&wv);
    out.push_back(&wo);
  }
};

struct FfnParams {
  nn::Parameter w1, b1, w2, b2;
  FfnParams() = default;
  FfnParams(const std::string& prefix, int d, int ffn)
      : w1(prefix + ".w1", d, ffn),
        b1(prefix + ".b1", 1, ffn),
        w2(prefix + ".w2", ffn, d),
        b2(prefix + ".b2", 1, d) {}
  void collect(std::vector<nn::Parameter*>& out) {
    out.push_back(&w1);
    out.push_back(&b1);
    out.push_back(&w2);
    out.push_back(&b2);
  }
};

struct EncoderLayer {
  nn::Parameter gain1, gain2;
  AttentionParams attn;
  FfnParams ffn;
  EncoderLayer() = default;
  EncoderLayer(const std::string& prefix, int d, int dffn)
      : gain1(prefix + ".gain1", 1, d),
        gain2(prefix + ".gain2", 1, d),
        attn(prefix + ".attn", d),
        ffn(prefix + ".ffn", d, dffn) {}
  void collect(std::vector<nn::Parameter*>& out) {
    out.push_back(&gain1);
    out.push_back(&gain2);
    attn.collect(out);
    ffn.collect(out);
  }
};

struct DecoderLayer {
  nn::Parameter gain1, gain2, gain3;
  AttentionParams self_attn, cross_attn;
  FfnParams ffn;
  DecoderLayer() = default;
  DecoderLayer(const std::string& prefix, int d, int dffn)
      : gain1(prefix + ".gain1", 1, d),
        gain2(prefix + ".gain2", 1, d),
        gain3(prefix + ".gain3", 1, d),
        self_attn(prefix + ".self", d),
        cross_attn(prefix + ".cross", d),
        ffn(prefix + ".ffn", d, dffn) {}
  void collect(std::vector<nn::Parameter*>& out) {
    out.push_back(&gain1);
    out.push_back(&gain2);
    out.push_back(&gain3);
    self_attn.collect(out);
    cross_attn.collect(out);
    ffn.collect(out);
  }
};

}  // namespace detail

/// Small encoder-decoder transformer over the nn tape. The encoder consumes
/// the visual prefix (continuous vectors), the decoder consumes token ids.
class Seq2SeqModel {
 public:
  Seq2SeqModel() = default;

  explicit Seq2SeqModel(const TransformerConfig& cfg) : cfg_(cfg) {
    if (cfg.vocab <= 0) throw ConfigError("Seq2SeqModel: vocab size not set");
    tok_emb_ = nn::Parameter("tok_emb", cfg.vocab, cfg.d_model);
    enc_pos_ = nn::Parameter("enc_pos", cfg.max_prefix, cfg.d_model);
    dec_pos_ = nn::Parameter("dec_pos", cfg.max_len, cfg.d_model);
    for (int i = 0; i < cfg.enc_layers; ++i)
      enc_layers_.emplace_back("enc" + std::to_string(i), cfg.d_model,
                               cfg.d_ffn);
    for (int i = 0; i < cfg.dec_layers; ++i)
      dec_layers_.emplace_back("dec" + std::to_string(i), cfg.d_model,
                               cfg.d_ffn);
    enc_final_gain_ = nn::Parameter("enc_final_gain", 1, cfg.d_model);
    dec_final_gain_ = nn::Parameter("dec_final_gain", 1, cfg.d_model);
    w_out_ = nn::Parameter("w_out", cfg.d_model, cfg.vocab);
    b_out_ = nn::Parameter("b_out", 1, cfg.vocab);
  }

  void init(std::mt19937_64& rng) {
    double s = 0.05;
    for (nn::Parameter* p : parameters()) {
      if (p->name.find("gain") != std::string::npos) {
        p->value.setOnes();
      } else if (p->name.size() >= 2 &&
                 p->name.compare(p->name.size() - 2, 2, "b1") == 0) {
        p->value.setZero();
      } else if (p->name.size() >= 2 &&
                 p->name.compare(p->name.size() - 2, 2, "b2") == 0) {
        p->value.setZero();
      } else if (p->name == "b_out") {
        p->value.setZero();
      } else {
        p->init_normal(rng, s);
      }
    }
  }

  const TransformerConfig& config() const { return cfg_; }

  std::vector<nn::Parameter*> parameters() {
    std::vector<nn::Parameter*> out{&tok_emb_, &enc_pos_, &dec_pos_};
    for (auto& l : enc_layers_) l.collect(out);
    for (auto& l : dec_layers_) l.collect(out);
    out.push_back(&enc_final_gain_);
    out.push_back(&dec_final_gain_);
    out.push_back(&w_out_);
    out.push_back(&b_out_);
    return out;
  }

  nn::Parameter& token_embedding() { return tok_emb_; }

  int token_embedding_node(nn::Graph& g) { return g.param(tok_emb_); }

  /// Encoder forward over a prefix node (P×d).
  int encode(nn::Graph& g, int prefix) {
    Eigen::Index P = g.val(prefix).rows();
    if (P > cfg_.max_prefix)
      throw ConfigError("visual prefix longer than max_prefix");
    int pos = g.param(enc_pos_);
    int x = g.add2(prefix, g.slice_rows(pos, 0, P));
    for (auto& l : enc_layers_) {
      int n1 = g.rmsnorm(x, g.param(l.gain1));
      x = g.add2(x, attention(g, n1, n1, l.attn, /*causal=*/false));
      int n2 = g.rmsnorm(x, g.param(l.gain2));
      x = g.add2(x, ffn(g, n2, l.ffn));
    }
    return g.rmsnorm(x, g.param(enc_final_gain_));
  }

  /// Decoder forward: causal self-attention + cross-attention to enc_out.
  /// input_ids has length T; returns T×vocab logits.
  int decode_logits(nn::Graph& g, int enc_out,
                    const std::vector<int>& input_ids) {
    Eigen::Index T = static_cast<Eigen::Index>(input_ids.size());
    if (T > cfg_.max_len)
      throw ConfigError("decoder sequence longer than max_len");
    int emb_table = g.param(tok_emb_);
    int y = g.rows_of(emb_table, input_ids);
    int pos = g.param(dec_pos_);
    y = g.add2(y, g.slice_rows(pos, 0, T));
    for (auto& l : dec_layers_) {
      int n1 = g.rmsnorm(y, g.param(l.gain1));
      y = g.add2(y, attention(g, n1, n1, l.self_attn, /*causal=*/true));
      int n2 = g.rmsnorm(y, g.param(l.gain2));
      y = g.add2(y, attention(g, n2, enc_out, l.cross_attn, /*causal=*/false));
      int n3 = g.rmsnorm(y, g.param(l.gain3));
      y = g.add2(y, ffn(g, n3, l.ffn));
    }
    y = g.rmsnorm(y, g.param(dec_final_gain_));
    return g.add_rowvec(g.matmul(y, g.param(w_out_)), g.param(b_out_));
  }

  /// Inference-only encoder pass on a plain matrix.
  nn::Mat encode_plain(const nn::Mat& prefix) {
    nn::Graph g;
    return g.val(encode(g, g.input(prefix)));
  }

  /// Inference-only logits for one decoder sequence.
  nn::Mat logits_plain(const nn::Mat& enc_out,
                       const std::vector<int>& input_ids) {
    nn::Graph g;
    return g.val(decode_logits(g, g.input(enc_out), input_ids));
  }

  // -- checkpoint serialization ---------------------------------------------

  void save_weights(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write weights: " + path);
    write_params(out, parameters());
  }

  void load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read weights: " + path);
    read_params(in, parameters());
  }

  static void write_params(std::ostream& out,
                           const std::vector<nn::Parameter*>& params) {
    uint64_t n = params.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    for (auto* p : params) {
      uint64_t len = p->name.size();
      out.write(reinterpret_cast<const char*>(&len), sizeof(len));
      out.write(p->name.data(), static_cast<std::streamsize>(len));
      uint64_t rows = static_cast<uint64_t>(p->value.rows());
      uint64_t cols = static_cast<uint64_t>(p->value.cols());
      out.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
      out.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
      out.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(sizeof(double) * rows * cols));
    }
  }

  static void read_params(std::istream& in,
                          const std::vector<nn::Parameter*>& params) {
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (n != params.size())
      throw ParseError("weights file: parameter count mismatch");
    for (auto* p : params) {
      uint64_t len = 0;
      in.read(reinterpret_cast<char*>(&len), sizeof(len));
      std::string name(len, '\0');
      in.read(name.data(), static_cast<std::streamsize>(len));
      if (name != p->name)
        throw ParseError("weights file: expected parameter " + p->name +
                         ", found " + name);
      uint64_t rows = 0, cols = 0;
      in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
      in.read(reinterpret_cast<char*>(&cols), sizeof(cols));
      if (rows != static_cast<uint64_t>(p->value.rows()) ||
          cols != static_cast<uint64_t>(p->value.cols()))
        throw ParseError("weights file: shape mismatch for " + p->name);
      in.read(reinterpret_cast<char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * rows * cols));
    }
    if (!in) throw ParseError("weights file: truncated");
  }

 private:
  int ffn(nn::Graph& g, int x, detail::FfnParams& p) {
    int h = g.add_rowvec(g.matmul(x, g.param(p.w1)), g.param(p.b1));
    h = g.tanh_(h);
    return g.add_rowvec(g.matmul(h, g.param(p.w2)), g.param(p.b2));
  }

  int attention(nn::Graph& g, int xq, int xkv, detail::AttentionParams& p,
                bool causal) {
    int d = cfg_.d_model;
    int heads = cfg_.n_heads;
    int dh = d / heads;
    Eigen::Index Tq = g.val(xq).rows();
    Eigen::Index Tk = g.val(xkv).rows();
    int q = g.matmul(xq, g.param(p.wq));
    int k = g.matmul(xkv, g.param(p.wk));
    int v = g.matmul(xkv, g.param(p.wv));
    int qT = g.transpose(q);  // d×Tq
    int kT = g.transpose(k);
    int vT = g.transpose(v);
    nn::Mat mask;
    if (causal) {
      mask = nn::Mat::Zero(Tq, Tk);
      for (Eigen::Index i = 0; i < Tq; ++i)
        for (Eigen::Index j = i + 1; j < Tk; ++j) mask(i, j) = -1e9;
    }
    std::vector<int> head_outs;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
      int qh = g.slice_rows(qT, h * dh, dh);  // dh×Tq
      int kh = g.slice_rows(kT, h * dh, dh);  // dh×Tk
      int vh = g.slice_rows(vT, h * dh, dh);  // dh×Tk
      int scores = g.scale(g.matmul(g.transpose(qh), kh), inv_sqrt);  // Tq×Tk
      if (causal) scores = g.add_const(scores, mask);
      int attn = g.softmax_rows(scores);
      int out = g.matmul(attn, g.transpose(vh));  // Tq×dh
      head_outs.push_back(g.transpose(out));      // dh×Tq
    }
    int merged = g.transpose(g.concat_rows(head_outs));  // Tq×d
    return g.matmul(merged, g.param(p.wo));
  }

  TransformerConfig cfg_;
  nn::Parameter tok_emb_, enc_pos_, dec_pos_;
  std::vector<detail::EncoderLayer> enc_layers_;
  std::vector<detail::DecoderLayer> dec_layers_;
  nn::Parameter enc_final_gain_, dec_final_gain_;
  nn::Parameter w_out_, b_out_;
};

// ---------------------------------------------------------------------------
// Beam search over the decoder
// ---------------------------------------------------------------------------

struct BeamHypothesis {
  std::vector<int> tokens;  // includes BOS, excludes EOS
  double log_prob = 0.0;
  bool finished = false;
};

/// Deterministic beam search: ties broken by token id, beams by score then
/// insertion order. `forced_prefix` tokens (after BOS) are teacher-forced.
inline std::vector<int> beam_search(Seq2SeqModel& model, const nn::Mat& enc_out,
                                    int bos, int eos, int beam_size,
                                    int max_tokens,
                                    const std::vector<int>& forced_prefix = {}) {
  std::vector<BeamHypothesis> beams{{{bos}, 0.0, false}};
  for (int tok : forced_prefix) beams[0].tokens.push_back(tok);
  int max_len = std::min(max_tokens + static_cast<int>(beams[0].tokens.size()),
                         model.config().max_len);
  while (true) {
    bool all_done = true;
    for (auto& b : beams)
      if (!b.finished && static_cast<int>(b.tokens.size()) < max_len)
        all_done = false;
    if (all_done) break;
    std::vector<BeamHypothesis> candidates;
    for (auto& b : beams) {
      if (b.finished || static_cast<int>(b.tokens.size()) >= max_len) {
        candidates.push_back(b);
        continue;
      }
      nn::Mat logits = model.logits_plain(enc_out, b.tokens);
      Eigen::RowVectorXd row = logits.row(logits.rows() - 1);
      double mx = row.maxCoeff();
      Eigen::RowVectorXd lse = (row.array() - mx).exp();
      double z = std::log(lse.sum()) + mx;
      // top beam_size expansions of this beam
      std::vector<std::pair<double, int>> scored;
      scored.reserve(static_cast<size_t>(row.size()));
      for (int t = 0; t < row.size(); ++t)
        scored.push_back({row(t) - z, t});
      std::partial_sort(scored.begin(),
                        scored.begin() +
                            std::min<size_t>(scored.size(),
                                             static_cast<size_t>(beam_size)),
                        scored.end(), [](auto& a, auto& b2) {
                          if (a.first != b2.first) return a.first > b2.first;
                          return a.second < b2.second;
                        });
      for (int i = 0;
           i < beam_size && i < static_cast<int>(scored.size()); ++i) {
        BeamHypothesis h = b;
        h.log_prob += scored[i].first;
        int t = scored[i].second;
        if (t == eos) {
          h.finished = true;
        } else {
          h.tokens.push_back(t);
        }
        candidates.push_back(std::move(h));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](auto& a, auto& b) { return a.log_prob > b.log_prob; });
    if (candidates.size() > static_cast<size_t>(beam_size))
      candidates.resize(static_cast<size_t>(beam_size));
    beams = std::move(candidates);
  }
  // best finished beam, else best overall
  for (auto& b : beams)
    if (b.finished) return b.tokens;
  return beams.front().tokens;
}

}  // namespace storyplan
