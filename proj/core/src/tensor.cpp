#include "mabn/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mabn {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("ShapeMismatch: negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void check_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string("NonFinite: non-finite value produced by op '") + op + "'");
    }
  }
}

namespace detail {

void accumulate_grad(Node& node, std::span<const double> contribution) {
  if (!node.requires_grad) return;
  node.ensure_grad();
  for (size_t i = 0; i < contribution.size(); ++i) node.grad[i] += contribution[i];
}

}  // namespace detail

Tensor::Tensor() : n_(std::make_shared<detail::Node>()) { n_->shape = {0}; }

Tensor Tensor::create(Shape shape, std::vector<double> values, bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size())) {
    throw ShapeError("ShapeMismatch: shape " + shape_str(shape) + " wants " + std::to_string(n) +
                     " values, got " + std::to_string(values.size()));
  }
  check_finite(values, "create");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return create(shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), value),
                requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return create({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("NotScalar: item() on tensor of shape " + shape_str(shape()));
  }
  return n_->values[0];
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw Error("grad accessed before backward populated it");
  return n_->grad;
}

std::span<double> Tensor::grad_mut() {
  n_->ensure_grad();
  return n_->grad;
}

Tensor Tensor::from_impl(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }

Tensor Tensor::detached_copy(bool requires_grad) const {
  auto node = std::make_shared<detail::Node>();
  node->shape = n_->shape;
  node->values = n_->values;
  node->requires_grad = requires_grad;
  return Tensor(node);
}

void backward(const Tensor& loss) {
  detail::Node* root = loss.node();
  if (root->numel() != 1) {
    throw ShapeError("NotScalar: backward() needs a scalar loss, got shape " +
                     shape_str(root->shape));
  }

  // Iterative post-order DFS; each node appended once. Shared ownership is
  // held for the whole sweep: releasing a child's edges must not destroy a
  // parent whose backward has not run yet.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<std::shared_ptr<detail::Node>, size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& top = stack.back();
    detail::Node* node = top.first.get();
    if (top.second < node->parents.size()) {
      std::shared_ptr<detail::Node> p = node->parents[top.second++];
      if (visited.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(top.first);
      stack.pop_back();
    }
  }

  root->requires_grad = true;
  root->grad.assign(1, 1.0);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = it->get();
    if (node->backward_fn && node->grad.size() == node->values.size()) {
      node->backward_fn(*node);
    }
    if (!node->is_leaf()) {
      // Release interior state: grads of intermediates and the graph edges.
      node->grad.clear();
      node->backward_fn = nullptr;
      node->parents.clear();
    }
  }
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

void zero_grads(std::vector<Tensor>& params) {
  zero_grads(std::span<Tensor>(params));
}

}  // namespace mabn
