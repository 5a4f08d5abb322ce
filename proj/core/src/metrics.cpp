#include "mabn/metrics.hpp"

#include <cmath>

#include "mabn/errors.hpp"

namespace mabn {

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) {
    throw ShapeError("ShapeMismatch: accuracy over mismatched prediction/label counts");
  }
  if (preds.empty()) throw DataError("EmptyTestSet: accuracy over zero samples");
  int64_t hits = 0;
  for (size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double macro_f1(std::span<const int> preds, std::span<const int> labels, int num_classes) {
  if (preds.size() != labels.size()) {
    throw ShapeError("ShapeMismatch: macro_f1 over mismatched prediction/label counts");
  }
  if (preds.empty()) throw DataError("EmptyTestSet: macro_f1 over zero samples");
  if (num_classes < 1) throw ConfigError("macro_f1 needs num_classes >= 1");

  std::vector<int64_t> tp(static_cast<size_t>(num_classes), 0);
  std::vector<int64_t> pred_pos(static_cast<size_t>(num_classes), 0);
  std::vector<int64_t> actual_pos(static_cast<size_t>(num_classes), 0);
  for (size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], y = labels[i];
    if (p < 0 || p >= num_classes || y < 0 || y >= num_classes) {
      throw ShapeError("ShapeMismatch: macro_f1 class index out of range");
    }
    pred_pos[static_cast<size_t>(p)]++;
    actual_pos[static_cast<size_t>(y)]++;
    if (p == y) tp[static_cast<size_t>(p)]++;
  }

  double sum = 0.0;
  int64_t counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    const auto ci = static_cast<size_t>(c);
    if (pred_pos[ci] == 0 && actual_pos[ci] == 0) continue;  // absent everywhere: excluded
    ++counted;
    if (pred_pos[ci] == 0 || actual_pos[ci] == 0) continue;  // F1 = 0 but counted
    const double precision = static_cast<double>(tp[ci]) / static_cast<double>(pred_pos[ci]);
    const double recall = static_cast<double>(tp[ci]) / static_cast<double>(actual_pos[ci]);
    if (precision + recall > 0.0) sum += 2.0 * precision * recall / (precision + recall);
  }
  return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("ShapeMismatch: pearson over mismatched lengths");
  if (x.empty()) throw DataError("EmptyTestSet: pearson over zero samples");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace mabn
