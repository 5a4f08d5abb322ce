// Gradient fidelity of every autodiff primitive against the central
// finite-difference oracle: 100 random seeds per primitive, inputs of at
// most 64 elements, 1e-4 relative tolerance with a 1e-6 absolute floor.

#include <doctest.h>

#include <cmath>
#include <functional>

#include "mabn/gradcheck.hpp"
#include "mabn/ops.hpp"
#include "mabn/rng.hpp"

using namespace mabn;

namespace {

constexpr double kTol = 1e-4;
constexpr double kFloor = 1e-6;
constexpr int kSeeds = 100;
constexpr double kH = 1e-5;

std::vector<double> random_values(Rng& rng, int64_t n, double lo = -2.0, double hi = 2.0) {
  std::vector<double> out(static_cast<size_t>(n));
  for (double& v : out) v = rng.uniform(lo, hi);
  return out;
}

// Keeps coordinates away from relu/abs kinks so central differences are
// two-sided samples of the same linear piece.
std::vector<double> random_values_off_kink(Rng& rng, int64_t n) {
  std::vector<double> out(static_cast<size_t>(n));
  for (double& v : out) {
    v = rng.uniform(0.05, 2.0);
    if (rng.bernoulli(0.5)) v = -v;
  }
  return out;
}

// Scalar-reducing wrapper: op output -> sum of elements, so every output
// coordinate contributes to the FD signal.
Tensor sum_all(const Tensor& t) {
  std::vector<int64_t> axes(static_cast<size_t>(t.dim()));
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int64_t>(i);
  return ops::scale(ops::mean_axis(t, axes), static_cast<double>(t.numel()));
}

void expect_grad_matches(const ScalarFn& f, const Tensor& x, const char* what) {
  Tensor fd = finite_diff_grad(f, x, kH);
  Tensor xg = x.detached_copy(/*requires_grad=*/true);
  (void)f(xg);  // analytic pass; make_fn runs backward onto xg
  REQUIRE(xg.has_grad());
  const double err = max_rel_error(xg.grad(), fd.values(), kFloor);
  INFO(what << " max rel err " << err);
  CHECK(err <= kTol);
}

// f both evaluates the loss and, when handed a requires_grad tensor, runs
// backward so gradients land on it.
ScalarFn make_fn(std::function<Tensor(const Tensor&)> build) {
  return [build = std::move(build)](const Tensor& x) {
    Tensor loss = build(x);
    if (x.requires_grad()) backward(loss);
    return loss.item();
  };
}

}  // namespace

TEST_CASE("gradcheck: finite differences on x^2") {
  Tensor x = Tensor::create({1}, {3.0});
  Tensor g = finite_diff_grad([](const Tensor& t) { return t.item() * t.item(); }, x, 1e-5);
  CHECK(g.values()[0] == doctest::Approx(6.0).epsilon(1e-6));
}

TEST_CASE("gradcheck: relu is locally linear away from zero") {
  Tensor x = Tensor::create({1}, {1.0});
  Tensor g = finite_diff_grad(
      [](const Tensor& t) { return ops::relu(t).values()[0]; }, x, 1e-5);
  CHECK(g.values()[0] == doctest::Approx(1.0));
}

TEST_CASE("gradcheck: every elementwise and reduction primitive") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(static_cast<uint64_t>(seed) + 17);
    const int64_t n = rng.uniform_int(2, 8);
    const int64_t m = rng.uniform_int(2, 8);

    Tensor a = Tensor::create({n, m}, random_values(rng, n * m));
    Tensor b = Tensor::create({n, m}, random_values(rng, n * m));
    Tensor v = Tensor::create({m}, random_values(rng, m));

    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::add(x, b)); }), a,
                        "add");
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::sub(b, x)); }), a,
                        "sub(rhs)");
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::mul(x, b)); }), a,
                        "mul");
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::neg(x)); }), a, "neg");
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::scale(x, -1.7)); }), a,
                        "scale");
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::add_scalar(x, 0.3)); }),
                        a, "add_scalar");
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::add_channel(x, v)); }), a,
        "add_channel(x)");
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::add_channel(a, x)); }), v,
        "add_channel(v)");
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::mul_channel(x, v)); }), a,
        "mul_channel(x)");
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::mul_channel(a, x)); }), v,
        "mul_channel(v)");
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::mean_axis(x, {0})); }),
                        a, "mean_axis0");
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::mean_axis(x, {0, 1})); }), a,
        "mean_all");
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::var_axis(x, {0})); }),
                        a, "var_axis0");
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::var_axis(x, {0, 1})); }), a, "var_all");
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::mse(x, b)); }), a,
                        "mse(lhs)");
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::mse(a, x)); }), b,
                        "mse(rhs)");
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::reshape(x, {m, n})); }), a, "reshape");

    // positive-domain primitive
    Tensor pos = Tensor::create({n}, random_values(rng, n, 0.2, 3.0));
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::rsqrt(x)); }), pos,
                        "rsqrt");

    // kink-avoiding primitives
    Tensor ak = Tensor::create({n, m}, random_values_off_kink(rng, n * m));
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::relu(x)); }), ak,
                        "relu");
  }
}

TEST_CASE("gradcheck: matmul, concat, rotate90k") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(static_cast<uint64_t>(seed) + 900);
    const int64_t n = rng.uniform_int(2, 5), k = rng.uniform_int(2, 5), m = rng.uniform_int(2, 5);
    Tensor a = Tensor::create({n, k}, random_values(rng, n * k));
    Tensor b = Tensor::create({k, m}, random_values(rng, k * m));
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::matmul(x, b)); }), a,
                        "matmul(lhs)");
    expect_grad_matches(make_fn([&](const Tensor& x) { return sum_all(ops::matmul(a, x)); }), b,
                        "matmul(rhs)");

    Tensor c = Tensor::create({n, k}, random_values(rng, n * k));
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::concat({x, c}, 0)); }), a, "concat0");
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::concat({c, x}, 1)); }), a, "concat1");

    const int64_t hw = rng.uniform_int(2, 4);
    Tensor img = Tensor::create({2, 2, hw, hw}, random_values(rng, 2 * 2 * hw * hw));
    const int rot = static_cast<int>(rng.uniform_int(0, 3));
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::rotate90k(x, rot)); }), img,
        "rotate90k");
  }
}

TEST_CASE("gradcheck: conv2d_3x3 input, weight and bias") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(static_cast<uint64_t>(seed) + 4242);
    const int64_t ci = rng.uniform_int(1, 2), co = rng.uniform_int(1, 2);
    const int64_t hw = rng.uniform_int(3, 4);
    Tensor x = Tensor::create({1, ci, hw, hw}, random_values(rng, ci * hw * hw));
    Tensor w = Tensor::create({co, ci, 3, 3}, random_values(rng, co * ci * 9, -0.8, 0.8));
    Tensor bias = Tensor::create({co}, random_values(rng, co));

    expect_grad_matches(
        make_fn([&](const Tensor& t) { return sum_all(ops::conv2d_3x3(t, w, bias)); }), x,
        "conv(input)");
    expect_grad_matches(
        make_fn([&](const Tensor& t) { return sum_all(ops::conv2d_3x3(x, t, bias)); }), w,
        "conv(weight)");
    expect_grad_matches(
        make_fn([&](const Tensor& t) { return sum_all(ops::conv2d_3x3(x, w, t)); }), bias,
        "conv(bias)");
  }
}

TEST_CASE("gradcheck: losses and similarity primitives") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(static_cast<uint64_t>(seed) + 31337);
    const int64_t n = rng.uniform_int(2, 6), k = rng.uniform_int(2, 5);
    Tensor logits = Tensor::create({n, k}, random_values(rng, n * k));
    std::vector<int> labels(static_cast<size_t>(n));
    for (auto& y : labels) y = static_cast<int>(rng.uniform_int(0, k - 1));

    expect_grad_matches(
        make_fn([&](const Tensor& x) { return ops::softmax_ce(x, labels); }), logits, "softmax_ce");
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return ops::softmax_entropy(x); }), logits,
        "softmax_entropy");

    // rows comfortably away from the norm floor
    Tensor u = Tensor::create({n, k}, random_values_off_kink(rng, n * k));
    Tensor w = Tensor::create({n, k}, random_values_off_kink(rng, n * k));
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::l2_normalize(x)); }), u, "l2_normalize");
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::cosine_sim(x, w)); }), u,
        "cosine_sim(lhs)");
    expect_grad_matches(
        make_fn([&](const Tensor& x) { return sum_all(ops::cosine_sim(u, x)); }), w,
        "cosine_sim(rhs)");
  }
}

TEST_CASE("l2_normalize: unit norm away from the floor") {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const int64_t n = rng.uniform_int(1, 6), d = rng.uniform_int(2, 8);
    Tensor x = Tensor::create({n, d}, random_values_off_kink(rng, n * d));
    Tensor y = ops::l2_normalize(x);
    for (int64_t r = 0; r < n; ++r) {
      double ss = 0.0;
      for (int64_t c = 0; c < d; ++c) ss += y.values()[r * d + c] * y.values()[r * d + c];
      CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-10);
    }
  }
}

TEST_CASE("op examples: relu, softmax_ce, population variance") {
  Tensor x = Tensor::create({3}, {-1.0, 0.0, 2.0});
  Tensor y = ops::relu(x);
  CHECK(y.values()[0] == 0.0);
  CHECK(y.values()[1] == 0.0);
  CHECK(y.values()[2] == 2.0);

  CHECK(ops::softmax_ce(Tensor::create({1, 2}, {0.0, 0.0}), {0}).item() ==
        doctest::Approx(0.6931).epsilon(1e-3));

  // population (1/N) convention
  CHECK(ops::var_axis(Tensor::create({2}, {0.0, 2.0}), {0}).item() == doctest::Approx(1.0));
}
