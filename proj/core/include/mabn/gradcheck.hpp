#pragma once

#include <functional>

#include "mabn/tensor.hpp"

namespace mabn {

/// Scalar-valued function of one tensor, evaluated on detached inputs.
using ScalarFn = std::function<double(const Tensor&)>;

/// Central-difference gradient (f(x+h) - f(x-h)) / 2h per coordinate.
/// Independent oracle for backward(): only calls f, never the graph.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h);

/// Worst relative error between analytic and reference gradients, with an
/// absolute floor below which coordinates count as matching.
double max_rel_error(std::span<const double> analytic, std::span<const double> reference,
                     double abs_floor = 1e-6);

}  // namespace mabn
