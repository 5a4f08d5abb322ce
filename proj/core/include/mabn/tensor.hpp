#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mabn/errors.hpp"

namespace mabn {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// One node of the autodiff graph. The graph is the implicit DAG formed by
/// `parents` links; backward() topologically orders it on the fly, visits
/// each node exactly once, and releases edges afterwards so intermediate
/// buffers are reclaimed as soon as the last user handle goes away.
struct Node {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated lazily during backward
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents
  const char* op = "leaf";

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  bool is_leaf() const { return !backward_fn; }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

void accumulate_grad(Node& node, std::span<const double> contribution);

}  // namespace detail

/// Dense n-dimensional array of 64-bit reals with shape metadata; also a
/// handle into the autodiff graph. Copies are shallow (shared storage);
/// use a fresh create() for an independent buffer.
class Tensor {
 public:
  Tensor();  // empty tensor, shape [0]

  /// Validates product(shape) == values.size() and that every value is
  /// finite; ShapeMismatch / NonFinite otherwise.
  static Tensor create(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return n_->numel(); }
  int64_t dim() const { return static_cast<int64_t>(n_->shape.size()); }

  std::span<const double> values() const { return n_->values; }
  /// Mutable access for in-place parameter updates (optimizers). Only
  /// sensible on leaves; graphs must not be kept alive across mutation.
  std::span<double> values_mut() { return n_->values; }

  /// Scalar value; NotScalar if numel() != 1.
  double item() const;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  bool has_grad() const { return n_->grad.size() == n_->values.size() && !n_->values.empty(); }
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad() { n_->grad.clear(); }

  bool is_leaf() const { return n_->is_leaf(); }
  const char* op() const { return n_->op; }

  bool defined() const { return n_ != nullptr; }
  detail::Node* node() const { return n_.get(); }
  const std::shared_ptr<detail::Node>& impl() const { return n_; }
  static Tensor from_impl(std::shared_ptr<detail::Node> n);

  /// Deep copy of values (no graph history, fresh buffer).
  Tensor detached_copy(bool requires_grad = false) const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::Node> n_;
};

/// Reverse-mode sweep from a scalar loss. Populates grad on every
/// requires_grad leaf reachable from `loss`, accumulating into existing
/// grads; call zero_grads() between optimization steps. The graph is
/// consumed: interior edges and buffers are released.
void backward(const Tensor& loss);

void zero_grads(std::span<Tensor> params);
void zero_grads(std::vector<Tensor>& params);

/// Throws NonFiniteError naming `op` if any value is NaN/Inf.
void check_finite(std::span<const double> values, const char* op);

}  // namespace mabn
