#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace mabn {

/// Evaluation results; worst_case_* are min over declared groups and
/// equal the plain metric when only one group exists.
struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double worst_case_accuracy = 0.0;
  double pearson_r = 0.0;
  double worst_case_pearson_r = 0.0;
  int64_t n_samples = 0;
  std::vector<std::pair<int32_t, double>> per_domain;  // (domain_id, accuracy)
};

double accuracy(std::span<const int> preds, std::span<const int> labels);

/// Unweighted mean of per-class F1. Classes absent from both predictions
/// and labels are excluded; classes with zero predicted-positive or zero
/// actual-positive contribute F1 = 0 and are counted.
double macro_f1(std::span<const int> preds, std::span<const int> labels, int num_classes);

/// Pearson correlation; 0 when either side has zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

}  // namespace mabn
