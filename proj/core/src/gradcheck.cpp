#include "mabn/gradcheck.hpp"

#include <cmath>

namespace mabn {

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h) {
  if (h <= 0.0) throw Error("finite_diff_grad needs h > 0");
  std::vector<double> base(x.values().begin(), x.values().end());
  std::vector<double> out(base.size());
  for (size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double fp = f(Tensor::create(x.shape(), std::move(plus)));
    const double fm = f(Tensor::create(x.shape(), std::move(minus)));
    out[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor::create(x.shape(), std::move(out));
}

double max_rel_error(std::span<const double> analytic, std::span<const double> reference,
                     double abs_floor) {
  if (analytic.size() != reference.size()) {
    throw ShapeError("ShapeMismatch: gradient size mismatch in max_rel_error");
  }
  double worst = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double diff = std::abs(analytic[i] - reference[i]);
    if (diff <= abs_floor) continue;
    const double denom = std::max(std::abs(reference[i]), std::abs(analytic[i]));
    worst = std::max(worst, diff / denom);
  }
  return worst;
}

}  // namespace mabn
