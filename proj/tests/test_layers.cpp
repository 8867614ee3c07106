#include <doctest.h>

#include <cmath>
#include <numbers>

#include "fedmae/error.hpp"
#include "fedmae/grad_check.hpp"
#include "fedmae/layers.hpp"
#include "fedmae/optim.hpp"
#include "helpers.hpp"

using namespace fedmae;
using testing::random_matrix;

namespace {

// Loss = sum(y .* R) for a fixed random R, so dy = R. The input is stored as
// parameter "x" to have its gradient checked too.
struct Probe {
  ParamStore ps;
  Matrix R;
};

double weighted_sum(const Matrix& y, const Matrix& R) { return (y.array() * R.array()).sum(); }

void randomize(ParamStore& ps, RngStream& rng, double scale = 0.5) {
  for (auto& [name, p] : ps)
    for (auto& v : p.value.values()) v = scale * rng.normal();
}

void add_input(ParamStore& ps, std::size_t rows, std::size_t cols, RngStream& rng) {
  Tensor x({rows, cols});
  for (auto& v : x.values()) v = rng.normal();
  ps.add("x", std::move(x));
}

}  // namespace

TEST_CASE("linear gradients") {
  RngStream rng(1);
  Probe p;
  init_linear(p.ps, "lin", 5, 3, rng);
  randomize(p.ps, rng);
  add_input(p.ps, 4, 5, rng);
  p.R = random_matrix(4, 3, rng);
  auto fn = [&](ParamStore& ps) {
    ps.zero_grad();
    const Matrix x = ps.value("x").matrix();
    Matrix y = linear_forward(ps, "lin", x);
    ps.at("x").grad.matrix() = linear_backward(ps, "lin", x, p.R);
    return weighted_sum(y, p.R);
  };
  const auto report = grad_check(fn, p.ps, 1e-4);
  CHECK(report.passed);
  CHECK(report.max_rel_error <= 1e-4);
}

TEST_CASE("layer norm output and gradients") {
  RngStream rng(2);
  Probe p;
  init_layer_norm(p.ps, "ln", 6);
  add_input(p.ps, 5, 6, rng);
  {
    const Matrix y = layer_norm_forward(p.ps, "ln", p.ps.value("x").matrix(), nullptr);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      CHECK(std::abs(y.row(r).mean()) < 1e-12);
      CHECK((y.row(r).array().square().mean()) == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
  randomize(p.ps, rng);
  p.R = random_matrix(5, 6, rng);
  auto fn = [&](ParamStore& ps) {
    ps.zero_grad();
    LayerNormCache cache;
    Matrix y = layer_norm_forward(ps, "ln", ps.value("x").matrix(), &cache);
    ps.at("x").grad.matrix() = layer_norm_backward(ps, "ln", cache, p.R);
    return weighted_sum(y, p.R);
  };
  CHECK(grad_check(fn, p.ps, 1e-4).passed);
}

TEST_CASE("gelu uses the exact erf form") {
  Matrix x(1, 3);
  x << -1.0, 0.0, 2.0;
  const Matrix y = gelu(x);
  CHECK(y(0, 1) == 0.0);
  CHECK(y(0, 0) == doctest::Approx(-0.15865525393145707));
  CHECK(y(0, 2) == doctest::Approx(1.9544997361036416));
  // Derivative by central differences.
  RngStream rng(3);
  const Matrix z = random_matrix(4, 4, rng, 2.0);
  const Matrix ones = Matrix::Ones(4, 4);
  const Matrix d = gelu_backward(z, ones);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    Matrix zp = z, zm = z;
    zp.data()[i] += 1e-6;
    zm.data()[i] -= 1e-6;
    const double num = (gelu(zp).data()[i] - gelu(zm).data()[i]) / 2e-6;
    CHECK(d.data()[i] == doctest::Approx(num).epsilon(1e-6));
  }
}

TEST_CASE("attention gradients and causality-free mixing") {
  RngStream rng(4);
  Probe p;
  const std::size_t seq = 3, dim = 4, heads = 2;
  ParamStore& ps = p.ps;
  init_linear(ps, "a.q", dim, dim, rng);
  init_linear(ps, "a.k", dim, dim, rng);
  init_linear(ps, "a.v", dim, dim, rng);
  init_linear(ps, "a.o", dim, dim, rng);
  randomize(ps, rng);
  add_input(ps, 2 * seq, dim, rng);
  p.R = random_matrix(2 * seq, dim, rng);
  auto fn = [&](ParamStore& s) {
    s.zero_grad();
    AttentionCache cache;
    Matrix y = attention_forward(s, "a", s.value("x").matrix(), seq, heads, &cache);
    s.at("x").grad.matrix() = attention_backward(s, "a", cache, p.R, seq, heads);
    return weighted_sum(y, p.R);
  };
  CHECK(grad_check(fn, ps, 1e-4).passed);

  AttentionCache cache;
  attention_forward(ps, "a", ps.value("x").matrix(), seq, heads, &cache);
  REQUIRE(cache.probs.size() == 2 * heads);
  for (const auto& pr : cache.probs)
    for (Eigen::Index r = 0; r < pr.rows(); ++r) CHECK(pr.row(r).sum() == doctest::Approx(1.0));

  // Sequences do not interact: changing sequence 1 leaves sequence 0 alone.
  Matrix x = ps.value("x").matrix();
  const Matrix y0 = attention_forward(ps, "a", x, seq, heads, nullptr);
  x.row(4).array() += 3.0;
  const Matrix y1 = attention_forward(ps, "a", x, seq, heads, nullptr);
  CHECK(y0.topRows(3) == y1.topRows(3));
  CHECK_THROWS_AS(attention_forward(ps, "a", x, 4, heads, nullptr), ValidationError);
}

TEST_CASE("mlp and block gradients") {
  RngStream rng(5);
  Probe p;
  init_block(p.ps, "blk", 4, 8, rng);
  randomize(p.ps, rng);
  add_input(p.ps, 6, 4, rng);
  p.R = random_matrix(6, 4, rng);
  auto mlp_fn = [&](ParamStore& s) {
    s.zero_grad();
    MlpCache cache;
    Matrix y = mlp_forward(s, "blk.mlp", s.value("x").matrix(), &cache);
    s.at("x").grad.matrix() = mlp_backward(s, "blk.mlp", cache, p.R);
    return weighted_sum(y, p.R);
  };
  CHECK(grad_check(mlp_fn, p.ps, 1e-4).passed);
  auto block_fn = [&](ParamStore& s) {
    s.zero_grad();
    BlockCache cache;
    Matrix y = block_forward(s, "blk", s.value("x").matrix(), 3, 2, &cache);
    s.at("x").grad.matrix() = block_backward(s, "blk", cache, p.R, 3, 2);
    return weighted_sum(y, p.R);
  };
  const auto report = grad_check(block_fn, p.ps, 1e-4);
  CHECK(report.passed);
  CHECK(report.entries.size() == p.ps.size());
}

TEST_CASE("softmax cross-entropy value and gradient") {
  Matrix logits(2, 3);
  logits << 1.0, 2.0, 3.0, 0.0, 0.0, 0.0;
  std::vector<int> labels = {2, 0};
  Matrix d;
  const double loss = softmax_cross_entropy(logits, labels, &d);
  const double l0 = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  const double l1 = std::log(3.0);
  CHECK(loss == doctest::Approx((l0 + l1) / 2));
  CHECK(d.row(0).sum() == doctest::Approx(0.0).epsilon(1e-12));

  ParamStore ps;
  ps.add("x", Tensor::from_matrix(logits));
  auto fn = [&](ParamStore& s) {
    s.zero_grad();
    Matrix g;
    const double l = softmax_cross_entropy(s.value("x").matrix(), labels, &g);
    s.at("x").grad.matrix() = g;
    return l;
  };
  CHECK(grad_check(fn, ps, 1e-4).passed);
  CHECK_THROWS_AS(softmax_cross_entropy(logits, std::vector<int>{3, 0}, nullptr), ValidationError);
}

TEST_CASE("masked mse normalizes by selected entries") {
  Matrix recon(3, 2), target = Matrix::Zero(3, 2);
  recon << 1, 1, 2, 2, 3, 3;
  std::vector<double> w = {0, 1, 1};
  Matrix d;
  const double loss = masked_mse(recon, target, w, &d);
  CHECK(loss == doctest::Approx(0.5 * (4 + 4 + 9 + 9) / 4.0));
  CHECK(d(0, 0) == 0.0);
  CHECK(d(1, 0) == doctest::Approx(2.0 / 4.0));
  std::vector<double> none = {0, 0, 0};
  CHECK_THROWS_AS(masked_mse(recon, target, none, nullptr), ValidationError);
}

TEST_CASE("grad check catches a wrong gradient and non-finite losses") {
  ParamStore ps;
  ps.add("x", Tensor({3}, 1.0));
  auto wrong = [](ParamStore& s) {
    s.zero_grad();
    double l = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      l += s.at("x").value[i] * s.at("x").value[i];
      s.at("x").grad[i] = s.at("x").value[i];  // should be 2x
    }
    return l;
  };
  const auto bad = grad_check(wrong, ps, 1e-4);
  CHECK_FALSE(bad.passed);
  CHECK(bad.entries[0].name == "x");
  auto nan_fn = [](ParamStore& s) {
    s.zero_grad();
    return s.at("x").value[0] > 1.0 ? std::nan("") : 0.0;
  };
  const auto nf = grad_check(nan_fn, ps, 1e-4);
  CHECK_FALSE(nf.passed);
  CHECK(nf.diagnostic.find("x") != std::string::npos);
}

TEST_CASE("param store basics") {
  ParamStore a;
  a.add("b", Tensor({2}, 1.0));
  a.add("a", Tensor({1}, 2.0));
  CHECK(a.names() == std::vector<std::string>{"a", "b"});
  CHECK(a.scalar_count() == 3);
  CHECK_THROWS_AS(a.add("a", Tensor({1})), ValidationError);
  CHECK_THROWS_AS(a.at("zzz"), ValidationError);
  ParamStore b = a;
  CHECK(a == b);
  b.at("a").value[0] = 2.0000000001;
  CHECK_FALSE(a == b);
}

TEST_CASE("adamw matches a hand-computed step") {
  ParamStore ps;
  ps.add("layer.w", Tensor({1}, 1.0));
  ps.add("layer.b", Tensor({1}, 1.0));
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  AdamW opt(ps, cfg);
  ps.at("layer.w").grad[0] = 2.0;
  ps.at("layer.b").grad[0] = 2.0;
  opt.step(ps);
  // First step: mhat = g, vhat = g^2, update = g / (|g| + eps).
  const double adam = 2.0 / (2.0 + cfg.eps);
  CHECK(ps.at("layer.w").value[0] == doctest::Approx(1.0 - 0.1 * (adam + 0.5 * 1.0)));
  CHECK(ps.at("layer.b").value[0] == doctest::Approx(1.0 - 0.1 * adam));
  CHECK(opt.step_count() == 1);

  // Second step with zero gradient, by hand.
  ps.zero_grad();
  const double w1 = ps.at("layer.w").value[0];
  opt.step(ps);
  const double m = 0.9 * 0.1 * 2.0, v = 0.95 * 0.05 * 4.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.95 * 0.95);
  CHECK(ps.at("layer.w").value[0] ==
        doctest::Approx(w1 - 0.1 * (mhat / (std::sqrt(vhat) + cfg.eps) + 0.5 * w1)));

  AdamWConfig frozen;
  frozen.lr = 0.0;
  AdamW opt0(ps, frozen);
  const ParamStore before = ps;
  ps.at("layer.w").grad[0] = 5.0;
  opt0.step(ps);
  CHECK(ps == before);
}
