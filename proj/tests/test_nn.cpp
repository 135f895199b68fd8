#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "storyplan/nn.hpp"

using namespace storyplan;
using nn::Mat;

namespace {

// Finite-difference oracle: |analytic - central| / max(1, |central|) per entry.
double fd_max_rel_error(std::vector<nn::Parameter*> params,
                        const std::function<double(nn::Graph&, bool)>& build,
                        double h = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    nn::Graph g;
    build(g, true);
  }
  double worst = 0.0;
  for (auto* p : params) {
    Mat analytic = p->grad;
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
        double orig = p->value(i, j);
        p->value(i, j) = orig + h;
        nn::Graph gp;
        double lp = build(gp, false);
        p->value(i, j) = orig - h;
        nn::Graph gm;
        double lm = build(gm, false);
        p->value(i, j) = orig;
        double numeric = (lp - lm) / (2 * h);
        double err = std::abs(analytic(i, j) - numeric) /
                     std::max(1.0, std::abs(numeric));
        worst = std::max(worst, err);
      }
  }
  return worst;
}

}  // namespace

TEST_CASE("graph ops match finite differences") {
  std::mt19937_64 rng(11);
  nn::Parameter W("W", 4, 3), b("b", 1, 3), U("U", 3, 3), gain("g", 1, 3);
  W.init_normal(rng, 0.5);
  b.init_normal(rng, 0.5);
  U.init_normal(rng, 0.5);
  gain.init_normal(rng, 0.5);
  Mat X = Mat::Random(5, 4);

  Mat target = Mat::Random(5, 3);
  auto build = [&](nn::Graph& g, bool backward) -> double {
    int x = g.input(X);
    int h1 = g.add_rowvec(g.matmul(x, g.param(W)), g.param(b));
    int h2 = g.tanh_(h1);
    int h3 = g.rmsnorm(g.matmul(h2, g.param(U)), g.param(gain));
    int h4 = g.softmax_rows(h3);
    int loss = g.sum_all(g.hadamard(h4, g.input(target)));
    if (backward) g.backward(loss);
    return g.val(loss)(0, 0);
  };
  REQUIRE(fd_max_rel_error({&W, &b, &U, &gain}, build) < 1e-4);
}

TEST_CASE("structural ops match finite differences") {
  std::mt19937_64 rng(12);
  nn::Parameter T("table", 6, 4), S("scale", 3, 1);
  T.init_normal(rng, 0.5);
  S.init_normal(rng, 0.5);
  std::vector<int> ids = {1, 4, 1};  // repeated row exercises scatter-add
  Mat target = Mat::Random(3, 4);

  auto build = [&](nn::Graph& g, bool backward) -> double {
    int rows = g.rows_of(g.param(T), ids);
    int scaled = g.scale_rows(rows, g.param(S));
    int top = g.slice_rows(g.concat_rows({scaled, rows}), 1, 3);
    int tr = g.transpose(g.transpose(top));
    int loss = g.sum_all(g.hadamard(g.relu(tr), g.input(target)));
    if (backward) g.backward(loss);
    return g.val(loss)(0, 0);
  };
  REQUIRE(fd_max_rel_error({&T, &S}, build) < 1e-4);
}

TEST_CASE("cross entropy matches finite differences") {
  std::mt19937_64 rng(13);
  nn::Parameter W("W", 4, 5);
  W.init_normal(rng, 0.5);
  Mat X = Mat::Random(6, 4);
  std::vector<int> targets = {0, 3, 2, 4, 1, 0};
  std::vector<double> mask = {1, 1, 0, 1, 0, 1};

  auto build = [&](nn::Graph& g, bool backward) -> double {
    int logits = g.matmul(g.input(X), g.param(W));
    auto ce = g.cross_entropy_rows(logits, targets, mask);
    if (backward) g.backward(ce.loss_id);
    return g.val(ce.loss_id)(0, 0);
  };
  REQUIRE(fd_max_rel_error({&W}, build) < 1e-4);
}

TEST_CASE("masked positions contribute exactly zero loss and gradient") {
  std::mt19937_64 rng(14);
  nn::Parameter W("W", 4, 5);
  W.init_normal(rng, 0.5);
  Mat X = Mat::Random(6, 4);
  std::vector<int> targets = {0, 3, 2, 4, 1, 0};
  std::vector<double> mask = {1, 0, 1, 0, 1, 1};

  auto run = [&](const std::vector<int>& tgt) {
    W.zero_grad();
    nn::Graph g;
    int logits = g.matmul(g.input(X), g.param(W));
    auto ce = g.cross_entropy_rows(logits, tgt, mask);
    g.backward(ce.loss_id);
    return std::make_pair(g.val(ce.loss_id)(0, 0), ce.per_token);
  };

  auto [loss, per_token] = run(targets);
  Mat grad = W.grad;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i] == 0.0) REQUIRE(per_token[i] == 0.0);

  // Perturbing masked labels changes nothing, bit for bit.
  auto perturbed = targets;
  perturbed[1] = (perturbed[1] + 3) % 5;
  perturbed[3] = (perturbed[3] + 1) % 5;
  auto [loss2, per_token2] = run(perturbed);
  REQUIRE(loss2 == loss);  // bit-identical
  REQUIRE(per_token2 == per_token);
  REQUIRE(W.grad == grad);
}

TEST_CASE("cross entropy normalizes by the unmasked count") {
  nn::Graph g;
  Mat logits = Mat::Zero(4, 3);  // uniform rows, loss = ln 3 each
  int l = g.input(logits);
  auto ce = g.cross_entropy_rows(l, {0, 1, 2, 0}, {1, 1, 0, 0});
  REQUIRE(g.val(ce.loss_id)(0, 0) == Catch::Approx(std::log(3.0)));
}

TEST_CASE("gradient accumulates across two backward passes") {
  nn::Parameter W("W", 2, 2);
  W.value << 1, 2, 3, 4;
  Mat X = Mat::Identity(2, 2);
  for (int rep = 0; rep < 2; ++rep) {
    nn::Graph g;
    int loss = g.sum_all(g.matmul(g.input(X), g.param(W)));
    g.backward(loss);
  }
  REQUIRE(W.grad == Mat::Constant(2, 2, 2.0));
}

TEST_CASE("adam with warmup") {
  nn::Parameter p("p", 1, 1);
  p.value(0, 0) = 1.0;
  nn::AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.warmup_ratio = 0.5;
  cfg.total_steps = 10;
  nn::Adam opt({&p}, cfg);
  SECTION("learning rate ramps linearly then plateaus") {
    REQUIRE(opt.current_lr() == Catch::Approx(0.1 * 1.0 / 5.0));
    for (int i = 0; i < 5; ++i) {
      p.grad(0, 0) = 1.0;
      opt.step();
    }
    REQUIRE(opt.current_lr() == Catch::Approx(0.1));
  }
  SECTION("step moves against the gradient") {
    double before = p.value(0, 0);
    p.grad(0, 0) = 1.0;
    opt.step();
    REQUIRE(p.value(0, 0) < before);
  }
}

TEST_CASE("adam converges on a quadratic") {
  nn::Parameter p("p", 1, 2);
  p.value << 3.0, -2.0;
  nn::AdamConfig cfg;
  cfg.lr = 0.05;
  nn::Adam opt({&p}, cfg);
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    p.grad = 2.0 * p.value;  // d/dp of |p|^2
    opt.step();
  }
  REQUIRE(p.value.cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("parameter hashing detects any change") {
  std::mt19937_64 rng(15);
  nn::Parameter a("a", 3, 3), b("b", 2, 2);
  a.init_normal(rng, 1.0);
  b.init_normal(rng, 1.0);
  auto h1 = nn::hash_parameters({&a, &b});
  REQUIRE(h1 == nn::hash_parameters({&a, &b}));
  b.value(1, 1) += 1e-12;
  REQUIRE(h1 != nn::hash_parameters({&a, &b}));
}
