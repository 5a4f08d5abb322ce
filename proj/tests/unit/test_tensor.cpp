#include <doctest.h>

#include <cmath>
#include <limits>

#include "mabn/ops.hpp"
#include "mabn/tensor.hpp"

using namespace mabn;

TEST_CASE("tensor: create echoes shape and values") {
  Tensor t = Tensor::create({2, 2}, {1, 2, 3, 4}, false);
  CHECK(t.shape() == Shape{2, 2});
  CHECK(t.numel() == 4);
  CHECK(t.values()[2] == 3.0);
  CHECK_FALSE(t.requires_grad());
  CHECK(t.is_leaf());
}

TEST_CASE("tensor: degenerate empty tensor is valid") {
  Tensor t = Tensor::create({0}, {}, false);
  CHECK(t.numel() == 0);
}

TEST_CASE("tensor: shape/value count mismatch") {
  CHECK_THROWS_AS(Tensor::create({2}, {1.0, 2.0, 3.0}, false), ShapeError);
  CHECK_THROWS_AS(Tensor::create({2, 3}, {1.0}, false), ShapeError);
}

TEST_CASE("tensor: non-finite values rejected at creation") {
  CHECK_THROWS_AS(Tensor::create({2}, {1.0, std::nan("")}, false), NonFiniteError);
  CHECK_THROWS_AS(Tensor::create({1}, {std::numeric_limits<double>::infinity()}, false),
                  NonFiniteError);
}

TEST_CASE("tensor: non-finite op output names the op") {
  Tensor big = Tensor::create({1}, {1e308}, false);
  try {
    (void)ops::mul(big, big);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("mul") != std::string::npos);
  }
}

TEST_CASE("backward: d(x*x)/dx = 2x") {
  Tensor x = Tensor::create({1}, {3.0}, true);
  Tensor loss = ops::mul(x, x);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward: mse(x, x) has zero gradient") {
  Tensor x = Tensor::create({3}, {1.0, -2.0, 0.5}, true);
  backward(ops::mse(x, x));
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward: softmax cross-entropy closed form") {
  Tensor logits = Tensor::create({1, 2}, {0.0, 0.0}, true);
  Tensor loss = ops::softmax_ce(logits, {0});
  CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  backward(loss);
  CHECK(logits.grad()[0] == doctest::Approx(-0.5));
  CHECK(logits.grad()[1] == doctest::Approx(0.5));
}

TEST_CASE("backward: rejects non-scalar losses") {
  Tensor x = Tensor::create({2}, {1.0, 2.0}, true);
  Tensor y = ops::add(x, x);
  CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("backward: grads accumulate until cleared") {
  Tensor x = Tensor::create({1}, {2.0}, true);
  backward(ops::mul(x, x));
  backward(ops::mul(x, x));
  CHECK(x.grad()[0] == doctest::Approx(8.0));  // 4 + 4
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("backward: diamond graph visits each node once") {
  // loss = (x+x) * (x+x) = 4x^2 -> dloss/dx = 8x
  Tensor x = Tensor::create({1}, {1.5}, true);
  Tensor s = ops::add(x, x);
  backward(ops::mul(s, s));
  CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("graph evaluation is deterministic") {
  auto run = [] {
    Tensor a = Tensor::create({4, 4}, std::vector<double>(16, 0.37), false);
    Tensor b = Tensor::create({4, 4}, std::vector<double>(16, -1.21), false);
    Tensor out = ops::matmul(ops::relu(ops::add(a, b)), b);
    std::vector<double> v(out.values().begin(), out.values().end());
    return v;
  };
  CHECK(run() == run());
}

TEST_CASE("constant inputs produce constant outputs (no graph)") {
  Tensor a = Tensor::create({2}, {1.0, 2.0}, false);
  Tensor out = ops::add(a, a);
  CHECK(out.is_leaf());
  CHECK_FALSE(out.requires_grad());
}
