#include "mabn/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mabn/hash.hpp"
#include "mabn/optim.hpp"
#include "mabn/ops.hpp"
#include "mabn/ssl.hpp"

namespace mabn {

void MetaConfig::validate() const {
  if (alpha <= 0.0 || delta <= 0.0 || eta <= 0.0) {
    throw ConfigError("learning rates alpha/delta/eta must be > 0");
  }
  if (meta_batch < 1) throw ConfigError("meta_batch must be >= 1");
  if (support_size < 1) throw ConfigError("support_size must be >= 1");
  if (query_size < 1) throw ConfigError("query_size must be >= 1");
  if (inner_steps < 1) throw ConfigError("inner_steps must be >= 1");
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (Train-mode BN)");
  if (plateau_window < 1) throw ConfigError("plateau_window must be >= 1");
}

Tensor supervised_loss(Model& model, const Tensor& x, const std::vector<int>& labels) {
  Tensor logits = model.classify(model.backbone_forward(x));
  if (model.task_kind() == TaskKind::Classification) {
    return ops::softmax_ce(logits, labels);
  }
  std::vector<double> targets(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) targets[i] = static_cast<double>(labels[i]);
  return ops::mse(logits, Tensor::create({static_cast<int64_t>(labels.size()), 1},
                                         std::move(targets)));
}

namespace {

struct PoolEntry {
  int32_t domain;
  int64_t sample;
};

Tensor gather_batch(const std::vector<Domain>& sources, std::span<const PoolEntry> entries,
                    std::vector<int>& labels_out) {
  const Domain& first = sources[static_cast<size_t>(entries[0].domain)];
  const int64_t elems = first.sample_elems();
  std::vector<double> out(entries.size() * static_cast<size_t>(elems));
  labels_out.resize(entries.size());
  for (size_t i = 0; i < entries.size(); ++i) {
    const Domain& d = sources[static_cast<size_t>(entries[i].domain)];
    std::copy_n(d.data.begin() + entries[i].sample * elems, elems,
                out.begin() + static_cast<int64_t>(i) * elems);
    labels_out[i] = d.labels[static_cast<size_t>(entries[i].sample)];
  }
  Shape shape;
  shape.push_back(static_cast<int64_t>(entries.size()));
  for (int64_t d : first.sample_shape) shape.push_back(d);
  return Tensor::create(std::move(shape), std::move(out));
}

void check_theta_untouched(Model& model) {
  if (!model.freeze_theta()) return;
  for (const auto& t : model.theta_params()) {
    if (t.has_grad()) {
      throw ModeError("ScopeViolation: theta received a gradient write while frozen");
    }
  }
}

}  // namespace

void train_joint(Model& model, const std::vector<Domain>& sources, const MetaConfig& cfg,
                 int64_t epochs, uint64_t seed, const TelemetrySink& sink) {
  cfg.validate();
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (epochs == 0) return;

  std::vector<PoolEntry> pool;
  for (size_t di = 0; di < sources.size(); ++di) {
    for (int64_t si = 0; si < sources[di].n_train; ++si) {
      pool.push_back({static_cast<int32_t>(di), si});
    }
  }
  if (pool.size() < 2) throw DataError("DataExhausted: joint training pool is empty");

  model.set_freeze_theta(false);
  model.set_mode(BNMode::Train);
  std::vector<Tensor> params = model.collect_params(Scope::AllParams);
  AdamState adam(params);
  double lr = cfg.eta;

  double best = std::numeric_limits<double>::infinity();
  int64_t stall = 0;

  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(seed, "joint_epoch", static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(pool);
    Rng ssl_rng(derive_seed(seed, "joint_ssl", static_cast<uint64_t>(epoch)));

    double epoch_sum = 0.0;
    int64_t batches = 0;
    for (size_t off = 0; off + 2 <= pool.size(); off += static_cast<size_t>(cfg.batch_size)) {
      const size_t take = std::min(static_cast<size_t>(cfg.batch_size), pool.size() - off);
      if (take < 2) break;  // Train-mode BN needs at least two samples
      std::vector<int> labels;
      Tensor x = gather_batch(sources, {pool.data() + off, take}, labels);

      try {
        Tensor ce = supervised_loss(model, x, labels);
        Tensor ssl = ssl_loss(model, x, ssl_rng);
        Tensor joint = joint_loss(ce, ssl, cfg.lambda);
        zero_grads(params);
        backward(joint);
        adam.step(params, lr);
        if (model.ssl_kind() == SslKind::ByolLite && model.has_byol_target()) {
          ema_update(model, model.ssl_config().byol.ema_tau);
        }
        epoch_sum += joint.item();
        ++batches;
        if (sink) {
          sink({epoch, "joint", -1, ce.item(), ssl.item(), joint.item(), lr});
        }
      } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string("DivergenceDetected: epoch ") + std::to_string(epoch) +
                             ": " + e.what());
      }
    }
    if (batches == 0) throw DataError("DataExhausted: no usable batches");

    // LR halving on plateau: relative improvement below tol for
    // plateau_window consecutive epochs.
    const double mean_loss = epoch_sum / static_cast<double>(batches);
    const double improvement = (best - mean_loss) / std::max(std::abs(best), 1e-12);
    if (std::isfinite(best) && improvement < cfg.plateau_tol) {
      if (++stall >= cfg.plateau_window) {
        lr *= 0.5;
        stall = 0;
      }
    } else {
      stall = 0;
    }
    best = std::min(best, mean_loss);
  }
}

void run_inner_loop(Model& model, const Tensor& support, double alpha, Scope scope,
                    int64_t inner_steps, uint64_t seed) {
  if (support.numel() == 0 || support.shape()[0] == 0) {
    throw DataError("EmptySupport: inner adaptation needs at least one sample");
  }
  if (inner_steps < 1) throw ConfigError("inner_steps must be >= 1");
  if ((scope == Scope::AllParams || scope == Scope::ThetaOnly) && model.freeze_theta()) {
    throw ModeError("ScopeViolation: scope " + std::string(scope_name(scope)) +
                    " needs theta unfrozen");
  }

  if (scope == Scope::FullBN) {
    model.reestimate_bn_stats(support);
  }
  model.set_mode(BNMode::Frozen);

  std::vector<Tensor> params = model.collect_params(scope);
  Rng rng(derive_seed(seed, "inner_loop"));
  for (int64_t step = 0; step < inner_steps; ++step) {
    zero_grads(params);
    Tensor loss = ssl_loss(model, support, rng);
    backward(loss);
    check_theta_untouched(model);
    sgd_step(params, alpha);
  }
}

AffineSnapshot inner_adapt(Model& model, const Tensor& support, double alpha, Scope scope,
                           int64_t inner_steps, uint64_t seed) {
  if (scope != Scope::AffineOnly && scope != Scope::FullBN) {
    throw ModeError("ScopeViolation: inner_adapt supports AffineOnly and FullBN scopes");
  }
  const AffineSnapshot meta_params = model.snapshot_affine();
  const BNMode saved_mode = model.mode();
  std::vector<std::pair<std::vector<double>, std::vector<double>>> saved_stats;
  if (scope == Scope::FullBN) {
    for (BNLayer* bn : model.bn_layers()) {
      saved_stats.emplace_back(bn->running_mean, bn->running_var);
    }
  }

  run_inner_loop(model, support, alpha, scope, inner_steps, seed);
  AffineSnapshot adapted = model.snapshot_affine();

  model.restore_affine(meta_params);
  if (scope == Scope::FullBN) {
    auto layers = model.bn_layers();
    for (size_t i = 0; i < layers.size(); ++i) {
      layers[i]->running_mean = saved_stats[i].first;
      layers[i]->running_var = saved_stats[i].second;
    }
  }
  model.set_mode(saved_mode);
  return adapted;
}

void meta_step(Model& model, const std::vector<DomainTask>& tasks, const MetaConfig& cfg,
               uint64_t seed, int64_t epoch, const TelemetrySink& sink) {
  if (tasks.empty()) throw DataError("EmptyMetaBatch: meta_step over zero tasks");
  if (cfg.scope == Scope::AllParams) {
    if (model.freeze_theta()) {
      throw ModeError("ScopeViolation: AllParams meta training needs theta unfrozen");
    }
  } else if (!model.freeze_theta()) {
    throw ModeError("ScopeViolation: meta_step requires frozen theta");
  }

  std::vector<size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return tasks[a].domain_id < tasks[b].domain_id;
  });

  std::vector<Tensor> meta_params = model.collect_params(cfg.scope);
  std::vector<std::vector<double>> total(meta_params.size());
  for (size_t i = 0; i < meta_params.size(); ++i) {
    total[i].assign(static_cast<size_t>(meta_params[i].numel()), 0.0);
  }

  for (size_t oi : order) {
    const DomainTask& task = tasks[oi];
    Model clone = model.clone();
    run_inner_loop(clone, task.support, cfg.alpha, cfg.scope, cfg.inner_steps,
                   derive_seed(seed, "task_inner", static_cast<uint64_t>(task.domain_id)));

    // Joint loss on the query set, evaluated at the adapted parameters;
    // the resulting gradient is applied to the original meta-parameters
    // below (first-order approximation).
    Rng query_rng(derive_seed(seed, "task_query", static_cast<uint64_t>(task.domain_id)));
    std::vector<Tensor> clone_params = clone.collect_params(cfg.scope);
    zero_grads(clone_params);
    Tensor ce = supervised_loss(clone, task.query, task.query_labels);
    Tensor ssl = ssl_loss(clone, task.query, query_rng);
    Tensor joint = joint_loss(ce, ssl, cfg.lambda);
    backward(joint);
    check_theta_untouched(clone);

    for (size_t i = 0; i < clone_params.size(); ++i) {
      if (!clone_params[i].has_grad()) continue;
      auto g = clone_params[i].grad();
      for (size_t k = 0; k < g.size(); ++k) total[i][k] += g[k];
    }
    if (sink) {
      sink({epoch, "meta", task.domain_id, ce.item(), ssl.item(), joint.item(), cfg.delta});
    }
  }

  if (cfg.outer_agg == OuterAgg::Mean) {
    const double inv = 1.0 / static_cast<double>(tasks.size());
    for (auto& g : total) {
      for (double& v : g) v *= inv;
    }
  }
  sgd_step(meta_params, total, cfg.delta);
}

void meta_train(Model& model, const std::vector<Domain>& sources, const MetaConfig& cfg,
                int64_t epochs, uint64_t seed, const TelemetrySink& sink) {
  cfg.validate();
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (sources.empty()) throw DataError("EmptyMetaBatch: no source domains");
  if (cfg.meta_batch > static_cast<int64_t>(sources.size())) {
    throw DataError("EmptyMetaBatch: meta_batch " + std::to_string(cfg.meta_batch) +
                    " exceeds the " + std::to_string(sources.size()) + " source domains");
  }
  if (epochs == 0) return;

  model.set_mode(BNMode::Frozen);

  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    Rng rng(derive_seed(seed, "meta_epoch", static_cast<uint64_t>(epoch)));
    std::vector<size_t> perm(sources.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);

    const int64_t steps = static_cast<int64_t>(sources.size()) / cfg.meta_batch;
    for (int64_t step = 0; step < steps; ++step) {
      const uint64_t step_seed =
          derive_seed(seed, "meta_step", static_cast<uint64_t>(epoch) * 100003u +
                                             static_cast<uint64_t>(step));
      std::vector<DomainTask> tasks;
      for (int64_t b = 0; b < cfg.meta_batch; ++b) {
        const Domain& d = sources[perm[static_cast<size_t>(step * cfg.meta_batch + b)]];
        tasks.push_back(sample_support_query(d, cfg.support_size, cfg.query_size, step_seed));
      }
      meta_step(model, tasks, cfg, step_seed, epoch, sink);
    }
  }
}

}  // namespace mabn
