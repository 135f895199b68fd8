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

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace storyplan::nn {

using Mat = Eigen::MatrixXd;

/// A named trainable tensor with its gradient accumulator and Adam state.
struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;

  Parameter() = default;
  Parameter(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)),
        value(Mat::Zero(rows, cols)),
        grad(Mat::Zero(rows, cols)),
        adam_m(Mat::Zero(rows, cols)),
        adam_v(Mat::Zero(rows, cols)) {}

  void init_normal(std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    for (Eigen::Index i = 0; i < value.rows(); ++i)
      for (Eigen::Index j = 0; j < value.cols(); ++j) value(i, j) = d(rng);
  }

  void zero_grad() { grad.setZero(); }
};

/// Reverse-mode autodiff tape over dense double matrices. One Graph per
/// forward pass; parameters live outside and accumulate gradients.
class Graph {
 public:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(Graph&)> backward;  // may be empty for leaves
  };

  int add(Mat value, std::function<void(Graph&)> backward = {}) {
    nodes_.push_back(Node{std::move(value), Mat(), std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Mat& val(int id) const { return nodes_[id].value; }
  Mat& grad(int id) { return nodes_[id].grad; }

  int input(const Mat& m) { return add(m); }

  /// Parameter leaf: gradient flows back into p.grad.
  int param(Parameter& p) {
    int id = add(p.value);
    nodes_[id].backward = [id, &p](Graph& g) { p.grad += g.grad(id); };
    return id;
  }

  int matmul(int a, int b) {
    int id = add(nodes_[a].value * nodes_[b].value);
    nodes_[id].backward = [id, a, b](Graph& g) {
      g.accum(a, g.grad(id) * g.nodes_[b].value.transpose());
      g.accum(b, g.nodes_[a].value.transpose() * g.grad(id));
    };
    return id;
  }

  int add2(int a, int b) {
    int id = add(nodes_[a].value + nodes_[b].value);
    nodes_[id].backward = [id, a, b](Graph& g) {
      g.accum(a, g.grad(id));
      g.accum(b, g.grad(id));
    };
    return id;
  }

  /// a (m×n) + row vector b (1×n) broadcast over rows.
  int add_rowvec(int a, int b) {
    Mat out = nodes_[a].value;
    out.rowwise() += nodes_[b].value.row(0);
    int id = add(std::move(out));
    nodes_[id].backward = [id, a, b](Graph& g) {
      g.accum(a, g.grad(id));
      g.accum(b, g.grad(id).colwise().sum());
    };
    return id;
  }

  int scale(int a, double c) {
    int id = add(nodes_[a].value * c);
    nodes_[id].backward = [id, a, c](Graph& g) { g.accum(a, g.grad(id) * c); };
    return id;
  }

  int hadamard(int a, int b) {
    int id = add(nodes_[a].value.cwiseProduct(nodes_[b].value));
    nodes_[id].backward = [id, a, b](Graph& g) {
      g.accum(a, g.grad(id).cwiseProduct(g.nodes_[b].value));
      g.accum(b, g.grad(id).cwiseProduct(g.nodes_[a].value));
    };
    return id;
  }

  int tanh_(int a) {
    Mat out = nodes_[a].value.array().tanh().matrix();
    int id = add(out);
    nodes_[id].backward = [id, a](Graph& g) {
      const Mat& y = g.nodes_[id].value;
      g.accum(a, g.grad(id).cwiseProduct(
                     (1.0 - y.array().square()).matrix()));
    };
    return id;
  }

  int relu(int a) {
    Mat out = nodes_[a].value.cwiseMax(0.0);
    int id = add(out);
    nodes_[id].backward = [id, a](Graph& g) {
      Mat mask = (g.nodes_[a].value.array() > 0.0).cast<double>().matrix();
      g.accum(a, g.grad(id).cwiseProduct(mask));
    };
    return id;
  }

  int transpose(int a) {
    int id = add(nodes_[a].value.transpose());
    nodes_[id].backward = [id, a](Graph& g) {
      g.accum(a, g.grad(id).transpose());
    };
    return id;
  }

  /// Adds a constant matrix (no gradient to the constant); used for
  /// attention masks.
  int add_const(int a, const Mat& c) {
    int id = add(nodes_[a].value + c);
    nodes_[id].backward = [id, a](Graph& g) { g.accum(a, g.grad(id)); };
    return id;
  }

  int softmax_rows(int a) {
    Mat out = nodes_[a].value;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      double mx = out.row(i).maxCoeff();
      out.row(i) = (out.row(i).array() - mx).exp();
      out.row(i) /= out.row(i).sum();
    }
    int id = add(out);
    nodes_[id].backward = [id, a](Graph& g) {
      const Mat& y = g.nodes_[id].value;
      const Mat& gy = g.grad(id);
      Mat gx(y.rows(), y.cols());
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        double dot = y.row(i).dot(gy.row(i));
        gx.row(i) =
            y.row(i).cwiseProduct(gy.row(i) - Mat::Constant(1, y.cols(), dot));
      }
      g.accum(a, gx);
    };
    return id;
  }

  /// Row-wise scaling: out(i,j) = a(i,j) * s(i,0).
  int scale_rows(int a, int s) {
    const Mat& A = nodes_[a].value;
    const Mat& S = nodes_[s].value;
    Mat out = A.array().colwise() * S.col(0).array();
    int id = add(out);
    nodes_[id].backward = [id, a, s](Graph& g) {
      const Mat& A2 = g.nodes_[a].value;
      const Mat& S2 = g.nodes_[s].value;
      g.accum(a, (g.grad(id).array().colwise() * S2.col(0).array()).matrix());
      Mat gs = g.grad(id).cwiseProduct(A2).rowwise().sum();
      g.accum(s, gs);
    };
    return id;
  }

  /// Per-row RMS normalization with a learned gain row vector.
  int rmsnorm(int a, int gain, double eps = 1e-6) {
    const Mat& X = nodes_[a].value;
    Mat inv_rms(X.rows(), 1);
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      inv_rms(i, 0) =
          1.0 / std::sqrt(X.row(i).squaredNorm() / X.cols() + eps);
    Mat normed = X.array().colwise() * inv_rms.col(0).array();
    Mat out = normed;
    out.array().rowwise() *= nodes_[gain].value.row(0).array();
    int id = add(out);
    Mat inv_copy = inv_rms;
    nodes_[id].backward = [id, a, gain, inv_copy](Graph& g) {
      const Mat& X2 = g.nodes_[a].value;
      const Mat& G = g.nodes_[gain].value;
      const Mat& gy = g.grad(id);
      Eigen::Index n = X2.cols();
      Mat normed2 = X2.array().colwise() * inv_copy.col(0).array();
      // gain gradient
      g.accum(gain, gy.cwiseProduct(normed2).colwise().sum());
      // input gradient: d/dx of x*r(x)*g with r = (mean(x^2)+eps)^-1/2
      Mat gx(X2.rows(), n);
      for (Eigen::Index i = 0; i < X2.rows(); ++i) {
        double r = inv_copy(i, 0);
        Eigen::RowVectorXd h = gy.row(i).cwiseProduct(G.row(0));
        double dot = h.dot(X2.row(i));
        gx.row(i) = h * r - X2.row(i) * (r * r * r * dot / n);
      }
      g.accum(a, gx);
    };
    return id;
  }

  int concat_rows(const std::vector<int>& ids) {
    Eigen::Index rows = 0, cols = nodes_[ids[0]].value.cols();
    for (int i : ids) rows += nodes_[i].value.rows();
    Mat out(rows, cols);
    Eigen::Index r = 0;
    for (int i : ids) {
      out.middleRows(r, nodes_[i].value.rows()) = nodes_[i].value;
      r += nodes_[i].value.rows();
    }
    std::vector<int> idv = ids;
    int id = add(std::move(out));
    nodes_[id].backward = [id, idv](Graph& g) {
      Eigen::Index r2 = 0;
      for (int i : idv) {
        Eigen::Index nr = g.nodes_[i].value.rows();
        g.accum(i, g.grad(id).middleRows(r2, nr));
        r2 += nr;
      }
    };
    return id;
  }

  int slice_rows(int a, Eigen::Index first, Eigen::Index count) {
    int id = add(nodes_[a].value.middleRows(first, count));
    nodes_[id].backward = [id, a, first, count](Graph& g) {
      Mat ga = Mat::Zero(g.nodes_[a].value.rows(), g.nodes_[a].value.cols());
      ga.middleRows(first, count) = g.grad(id);
      g.accum(a, ga);
    };
    return id;
  }

  /// Embedding lookup: rows of the table selected by ids. Gradient scatters
  /// back into the table rows.
  int rows_of(int table, const std::vector<int>& ids) {
    Mat out(static_cast<Eigen::Index>(ids.size()), nodes_[table].value.cols());
    for (size_t i = 0; i < ids.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = nodes_[table].value.row(ids[i]);
    std::vector<int> idv = ids;
    int id = add(std::move(out));
    nodes_[id].backward = [id, table, idv](Graph& g) {
      Mat gt = Mat::Zero(g.nodes_[table].value.rows(),
                         g.nodes_[table].value.cols());
      for (size_t i = 0; i < idv.size(); ++i)
        gt.row(idv[i]) += g.grad(id).row(static_cast<Eigen::Index>(i));
      g.accum(table, gt);
    };
    return id;
  }

  int sum_all(int a) {
    int id = add(Mat::Constant(1, 1, nodes_[a].value.sum()));
    nodes_[id].backward = [id, a](Graph& g) {
      g.accum(a, Mat::Constant(g.nodes_[a].value.rows(),
                               g.nodes_[a].value.cols(), g.grad(id)(0, 0)));
    };
    return id;
  }

  struct CrossEntropyOut {
    int loss_id = -1;             // 1×1 scalar node: mean loss over unmasked
    std::vector<double> per_token;  // exact per-position losses (0 at masked)
  };

  /// Fused softmax cross-entropy over rows of `logits`. `mask[i]` ∈ {0,1};
  /// masked rows contribute exactly zero loss and zero gradient regardless of
  /// their label.
  CrossEntropyOut cross_entropy_rows(int logits,
                                     const std::vector<int>& targets,
                                     const std::vector<double>& mask) {
    const Mat& L = nodes_[logits].value;
    Eigen::Index T = L.rows();
    Mat probs = L;
    for (Eigen::Index i = 0; i < T; ++i) {
      double mx = probs.row(i).maxCoeff();
      probs.row(i) = (probs.row(i).array() - mx).exp();
      probs.row(i) /= probs.row(i).sum();
    }
    double denom = 0;
    for (double m : mask) denom += m;
    if (denom == 0) denom = 1;
    CrossEntropyOut out;
    out.per_token.assign(static_cast<size_t>(T), 0.0);
    double total = 0;
    for (Eigen::Index i = 0; i < T; ++i) {
      if (mask[static_cast<size_t>(i)] == 0.0) continue;  // exactly zero
      double li = -std::log(std::max(probs(i, targets[i]), 1e-300));
      out.per_token[static_cast<size_t>(i)] = li;
      total += li;
    }
    int id = add(Mat::Constant(1, 1, total / denom));
    std::vector<int> tgt = targets;
    std::vector<double> msk = mask;
    Mat probs_copy = probs;
    nodes_[id].backward = [id, logits, tgt, msk, probs_copy,
                           denom](Graph& g) {
      double gy = g.grad(id)(0, 0);
      Mat gl = Mat::Zero(probs_copy.rows(), probs_copy.cols());
      for (Eigen::Index i = 0; i < probs_copy.rows(); ++i) {
        if (msk[static_cast<size_t>(i)] == 0.0) continue;
        gl.row(i) = probs_copy.row(i);
        gl(i, tgt[i]) -= 1.0;
        gl.row(i) *= gy / denom;
      }
      g.accum(logits, gl);
    };
    out.loss_id = id;
    return out;
  }

  /// Seeds the scalar node and propagates gradients in reverse tape order.
  void backward(int loss_id) {
    for (auto& n : nodes_)
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    nodes_[loss_id].grad = Mat::Constant(1, 1, 1.0);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
      if (nodes_[i].backward && nodes_[i].grad.size() > 0 &&
          nodes_[i].grad.cwiseAbs().sum() != 0.0)
        nodes_[i].backward(*this);
  }

 private:
  void accum(int id, const Mat& g) {
    if (nodes_[id].grad.size() == 0)
      nodes_[id].grad = Mat::Zero(nodes_[id].value.rows(),
                                  nodes_[id].value.cols());
    nodes_[id].grad += g;
  }

  std::vector<Node> nodes_;

  friend class GraphDebug;
};

// ---------------------------------------------------------------------------
// Adam with linear warmup
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_ratio = 0.05;
  long total_steps = 0;  // 0 disables warmup scheduling
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {}

  double current_lr() const {
    if (cfg_.total_steps <= 0) return cfg_.lr;
    long warmup =
        static_cast<long>(cfg_.warmup_ratio * static_cast<double>(cfg_.total_steps));
    if (warmup > 0 && step_ < warmup)
      return cfg_.lr * static_cast<double>(step_ + 1) /
             static_cast<double>(warmup);
    return cfg_.lr;
  }

  void step() {
    ++step_;
    double lr = current_lr();
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (Parameter* p : params_) {
      p->adam_m = cfg_.beta1 * p->adam_m + (1 - cfg_.beta1) * p->grad;
      p->adam_v =
          cfg_.beta2 * p->adam_v.array().matrix() +
          (1 - cfg_.beta2) * p->grad.cwiseProduct(p->grad);
      Mat mhat = p->adam_m / bc1;
      Mat vhat = p->adam_v / bc2;
      p->value.array() -=
          lr * mhat.array() / (vhat.array().sqrt() + cfg_.eps);
    }
  }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

 private:
  std::vector<Parameter*> params_;
  AdamConfig cfg_;
  long step_ = 0;
};

/// FNV-1a over the raw bytes of a parameter set; used for frozen-weights
/// contracts in tests and manifests.
inline uint64_t hash_parameters(const std::vector<const Parameter*>& params) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const Parameter* p : params)
    mix(p->value.data(), sizeof(double) * static_cast<size_t>(p->value.size()));
  return h;
}

inline uint64_t hash_matrix(const Mat& m) {
  uint64_t h = 1469598103934665603ull;
  const unsigned char* p = reinterpret_cast<const unsigned char*>(m.data());
  for (size_t i = 0; i < sizeof(double) * static_cast<size_t>(m.size()); ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace storyplan::nn
