// The macro-F1 and Pearson implementations against brute-force oracles
// built straight from the confusion matrix / covariance definitions.

#include <doctest.h>

#include <cmath>

#include "mabn/errors.hpp"
#include "mabn/metrics.hpp"
#include "mabn/rng.hpp"

using namespace mabn;

namespace {

// Confusion-matrix oracle with the pinned zero-division convention.
double macro_f1_oracle(const std::vector<int>& preds, const std::vector<int>& labels, int k) {
  std::vector<std::vector<int>> cm(static_cast<size_t>(k), std::vector<int>(static_cast<size_t>(k), 0));
  for (size_t i = 0; i < preds.size(); ++i) cm[static_cast<size_t>(labels[i])][static_cast<size_t>(preds[i])]++;
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < k; ++c) {
    int tp = cm[static_cast<size_t>(c)][static_cast<size_t>(c)];
    int actual = 0, predicted = 0;
    for (int j = 0; j < k; ++j) {
      actual += cm[static_cast<size_t>(c)][static_cast<size_t>(j)];
      predicted += cm[static_cast<size_t>(j)][static_cast<size_t>(c)];
    }
    if (actual == 0 && predicted == 0) continue;
    ++counted;
    if (actual == 0 || predicted == 0) continue;  // F1 = 0, still counted
    const double p = static_cast<double>(tp) / predicted;
    const double r = static_cast<double>(tp) / actual;
    if (p + r > 0) sum += 2 * p * r / (p + r);
  }
  return counted ? sum / counted : 0.0;
}

double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  const double cov = sxy / n - (sx / n) * (sy / n);
  const double vx = sxx / n - (sx / n) * (sx / n);
  const double vy = syy / n - (sy / n) * (sy / n);
  if (vx <= 0 || vy <= 0) return 0.0;
  return cov / std::sqrt(vx * vy);
}

}  // namespace

TEST_CASE("accuracy: exact fraction") {
  std::vector<int> p = {1, 1, 0}, y = {1, 0, 0};
  CHECK(accuracy(p, y) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("macro_f1: hand-computed 2/3 example") {
  // preds [1,1,0], labels [1,0,0]: per-class F1 both 2/3
  std::vector<int> p = {1, 1, 0}, y = {1, 0, 0};
  CHECK(macro_f1(p, y, 2) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("macro_f1: perfect predictions") {
  std::vector<int> y = {0, 1, 2, 1, 0};
  CHECK(macro_f1(y, y, 3) == doctest::Approx(1.0));
  CHECK(accuracy(y, y) == doctest::Approx(1.0));
}

TEST_CASE("macro_f1: zero-division conventions") {
  // class 2 absent everywhere: excluded. class 1 never predicted: F1=0 counted.
  std::vector<int> p = {0, 0, 0}, y = {0, 1, 0};
  const double expected = (2.0 * (2.0 / 3.0) * 1.0 / (2.0 / 3.0 + 1.0) + 0.0) / 2.0;
  CHECK(macro_f1(p, y, 3) == doctest::Approx(expected));
}

TEST_CASE("macro_f1: matches the confusion-matrix oracle on 1000 random sets") {
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = static_cast<int>(rng.uniform_int(2, 6));
    const int64_t n = rng.uniform_int(1, 30);
    std::vector<int> p(static_cast<size_t>(n)), y(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      p[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_int(0, k - 1));
      y[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_int(0, k - 1));
    }
    CHECK(std::abs(macro_f1(p, y, k) - macro_f1_oracle(p, y, k)) < 1e-12);
  }
}

TEST_CASE("pearson: matches the covariance oracle on 1000 random sets") {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const int64_t n = rng.uniform_int(2, 40);
    std::vector<double> x(static_cast<size_t>(n)), y(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      x[static_cast<size_t>(i)] = rng.normal(0.0, 2.0);
      y[static_cast<size_t>(i)] = rng.normal(0.0, 2.0);
    }
    CHECK(std::abs(pearson(x, y) - pearson_oracle(x, y)) < 1e-12);
  }
}

TEST_CASE("pearson: exact linear relation gives 1") {
  std::vector<double> y = {1.0, 2.0, 3.0, 4.0};
  std::vector<double> yhat = {2.0, 4.0, 6.0, 8.0};  // yhat = 2y
  CHECK(pearson(yhat, y) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("pearson: zero variance defined as 0") {
  std::vector<double> x = {1.0, 1.0, 1.0}, y = {0.5, 0.7, 0.2};
  CHECK(pearson(x, y) == 0.0);
}

TEST_CASE("metrics: range errors") {
  std::vector<int> p = {5}, y = {0};
  CHECK_THROWS_AS(macro_f1(p, y, 2), ShapeError);
  std::vector<int> empty;
  CHECK_THROWS_AS(accuracy(empty, empty), DataError);
}
