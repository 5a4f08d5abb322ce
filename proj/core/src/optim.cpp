#include "mabn/optim.hpp"

#include <cmath>

namespace mabn {

namespace {

void require_grad_shape(const Tensor& p, size_t grad_size, const char* who) {
  if (static_cast<size_t>(p.numel()) != grad_size) {
    throw ShapeError(std::string("ShapeMismatch: ") + who + " gradient size " +
                     std::to_string(grad_size) + " for parameter of " +
                     std::to_string(p.numel()) + " elements");
  }
}

}  // namespace

AdamState::AdamState(const std::vector<Tensor>& params, AdamConfig cfg) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
  }
}

void AdamState::apply(std::vector<Tensor>& params,
                      const std::vector<std::span<const double>>& grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ShapeError("ShapeMismatch: AdamState built for " + std::to_string(m_.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    require_grad_shape(params[pi], grads[pi].size(), "adam_step");
    auto vals = params[pi].values_mut();
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (size_t i = 0; i < vals.size(); ++i) {
      const double g = grads[pi][i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      vals[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void AdamState::step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                     double lr) {
  std::vector<std::span<const double>> views;
  views.reserve(grads.size());
  for (const auto& g : grads) views.emplace_back(g);
  apply(params, views, lr);
}

void AdamState::step(std::vector<Tensor>& params, double lr) {
  std::vector<std::vector<double>> zero_storage;
  std::vector<std::span<const double>> views;
  views.reserve(params.size());
  zero_storage.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad()) {
      views.emplace_back(p.grad());
    } else {
      zero_storage.emplace_back(static_cast<size_t>(p.numel()), 0.0);
      views.emplace_back(zero_storage.back());
    }
  }
  apply(params, views, lr);
}

void sgd_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
              double lr) {
  if (params.size() != grads.size()) {
    throw ShapeError("ShapeMismatch: sgd_step got " + std::to_string(grads.size()) +
                     " gradients for " + std::to_string(params.size()) + " parameters");
  }
  for (size_t pi = 0; pi < params.size(); ++pi) {
    require_grad_shape(params[pi], grads[pi].size(), "sgd_step");
    auto vals = params[pi].values_mut();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] -= lr * grads[pi][i];
  }
}

void sgd_step(std::vector<Tensor>& params, double lr) {
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    auto vals = p.values_mut();
    auto g = p.grad();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] -= lr * g[i];
  }
}

}  // namespace mabn
