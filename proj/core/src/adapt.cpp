#include "mabn/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "mabn/hash.hpp"
#include "mabn/optim.hpp"
#include "mabn/ops.hpp"
#include "mabn/telemetry.hpp"

namespace mabn {

Model adapt_domain(const Model& meta_model, const Tensor& support, const MetaConfig& cfg,
                   uint64_t seed) {
  Model adapted = meta_model.clone();
  run_inner_loop(adapted, support, cfg.alpha, cfg.scope, cfg.inner_steps, seed);
  adapted.set_mode(BNMode::Eval);
  return adapted;
}

PredictionSet predict_domain(Model& model, const Domain& domain, int64_t eval_batch) {
  if (domain.n_test() == 0) {
    throw DataError("EmptyTestSet: domain " + std::to_string(domain.id) + " has no test split");
  }
  if (eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
  model.set_mode(BNMode::Eval);

  PredictionSet out;
  out.domain_id = domain.id;
  const auto test_idx = domain.test_indices();
  for (size_t off = 0; off < test_idx.size(); off += static_cast<size_t>(eval_batch)) {
    const size_t take = std::min(static_cast<size_t>(eval_batch), test_idx.size() - off);
    std::span<const int64_t> idx(test_idx.data() + off, take);
    Tensor logits = model.classify(model.backbone_forward(domain.batch(idx)));
    const int64_t k = logits.shape()[1];
    auto lv = logits.values();
    for (size_t i = 0; i < take; ++i) {
      if (model.task_kind() == TaskKind::Regression) {
        out.scores.push_back(lv[static_cast<int64_t>(i)]);
        out.preds.push_back(0);
      } else {
        const double* row = lv.data() + static_cast<int64_t>(i) * k;
        const int arg = static_cast<int>(std::max_element(row, row + k) - row);
        out.preds.push_back(arg);
        out.scores.push_back(static_cast<double>(arg));
      }
      out.labels.push_back(domain.labels[static_cast<size_t>(idx[i])]);
    }
  }
  return out;
}

Metrics metrics_from(std::span<const PredictionSet> sets, int num_classes, TaskKind task) {
  if (sets.empty()) throw DataError("EmptyTestSet: metrics over zero domains");
  Metrics m;
  std::vector<int> preds, labels;
  std::vector<double> scores, targets;
  double worst_acc = std::numeric_limits<double>::infinity();
  double worst_r = std::numeric_limits<double>::infinity();
  for (const auto& s : sets) {
    preds.insert(preds.end(), s.preds.begin(), s.preds.end());
    labels.insert(labels.end(), s.labels.begin(), s.labels.end());
    scores.insert(scores.end(), s.scores.begin(), s.scores.end());
    for (int y : s.labels) targets.push_back(static_cast<double>(y));

    std::vector<double> dom_targets(s.labels.begin(), s.labels.end());
    const double dom_acc =
        task == TaskKind::Classification ? accuracy(s.preds, s.labels) : 0.0;
    const double dom_r = pearson(s.scores, dom_targets);
    m.per_domain.emplace_back(s.domain_id, task == TaskKind::Classification ? dom_acc : dom_r);
    worst_acc = std::min(worst_acc, dom_acc);
    worst_r = std::min(worst_r, dom_r);
  }
  m.n_samples = static_cast<int64_t>(labels.size());
  if (task == TaskKind::Classification) {
    m.accuracy = accuracy(preds, labels);
    m.macro_f1 = macro_f1(preds, labels, num_classes);
    m.worst_case_accuracy = worst_acc;
  }
  m.pearson_r = pearson(scores, targets);
  m.worst_case_pearson_r = worst_r;
  return m;
}

Metrics evaluate_domain(Model& model, const Domain& domain, int64_t eval_batch) {
  PredictionSet set = predict_domain(model, domain, eval_batch);
  const int num_classes = static_cast<int>(model.num_classes());
  return metrics_from({&set, 1}, num_classes, model.task_kind());
}

std::vector<size_t> random_derangement(size_t n, Rng& rng) {
  if (n < 2) throw DataError("TooFewDomains: a derangement needs n >= 2");
  std::vector<size_t> perm(n);
  for (;;) {
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    bool ok = true;
    for (size_t i = 0; i < n; ++i) {
      if (perm[i] == i) {
        ok = false;
        break;
      }
    }
    if (ok) return perm;
  }
}

MatchedShuffleResult run_matched_shuffle(const Model& meta_model,
                                         const std::vector<Domain>& targets,
                                         const MetaConfig& cfg, uint64_t seed) {
  if (targets.size() < 2) {
    throw DataError("TooFewDomains: matched/shuffled protocol needs >= 2 target domains");
  }
  MatchedShuffleResult result;
  const int num_classes = static_cast<int>(meta_model.num_classes());
  const TaskKind task = meta_model.task_kind();

  // Adapt every domain independently from the same meta parameters.
  std::vector<PredictionSet> matched_sets;
  for (size_t j = 0; j < targets.size(); ++j) {
    const uint64_t dom_seed = derive_seed(seed, "adapt", static_cast<uint64_t>(targets[j].id));
    Tensor support = sample_support(targets[j], cfg.support_size, dom_seed);
    Model adapted = adapt_domain(meta_model, support, cfg, dom_seed);
    result.snapshots.push_back(adapted.snapshot_affine());
    matched_sets.push_back(predict_domain(adapted, targets[j]));
  }
  result.matched = metrics_from(matched_sets, num_classes, task);

  // NoAdapt: meta parameters as-is.
  std::vector<PredictionSet> noadapt_sets;
  for (const auto& d : targets) {
    Model plain = meta_model.clone();
    noadapt_sets.push_back(predict_domain(plain, d));
  }
  result.no_adapt = metrics_from(noadapt_sets, num_classes, task);

  // NotMatched: domain j scored with the snapshot of a deranged partner.
  Rng drng(derive_seed(seed, "derangement"));
  result.derangement = random_derangement(targets.size(), drng);
  std::vector<PredictionSet> shuffled_sets;
  for (size_t j = 0; j < targets.size(); ++j) {
    Model borrowed = meta_model.clone();
    borrowed.restore_affine(result.snapshots[result.derangement[j]]);
    shuffled_sets.push_back(predict_domain(borrowed, targets[j]));
  }
  result.not_matched = metrics_from(shuffled_sets, num_classes, task);
  return result;
}

void entropy_refine(Model& model, const Tensor& batch, double lr, int64_t steps, Scope scope) {
  if (batch.numel() == 0 || batch.shape()[0] == 0) {
    throw DataError("EmptyBatch: entropy refinement needs at least one sample");
  }
  if (scope != Scope::AffineOnly && scope != Scope::FullBN) {
    throw ModeError("ScopeViolation: entropy_refine supports AffineOnly and FullBN scopes");
  }
  if (scope == Scope::FullBN) model.reestimate_bn_stats(batch);
  model.set_mode(BNMode::Frozen);
  std::vector<Tensor> params = model.collect_params(Scope::AffineOnly);
  for (int64_t s = 0; s < steps; ++s) {
    zero_grads(params);
    Tensor entropy = ops::softmax_entropy(model.classify(model.backbone_forward(batch)));
    backward(entropy);
    sgd_step(params, lr);
  }
}

Metrics evaluate_domain_with_refine(Model& model, const Domain& domain, double lr, int64_t steps,
                                    Scope scope, int64_t eval_batch) {
  if (domain.n_test() == 0) {
    throw DataError("EmptyTestSet: domain " + std::to_string(domain.id) + " has no test split");
  }
  PredictionSet out;
  out.domain_id = domain.id;
  const auto test_idx = domain.test_indices();
  for (size_t off = 0; off < test_idx.size(); off += static_cast<size_t>(eval_batch)) {
    const size_t take = std::min(static_cast<size_t>(eval_batch), test_idx.size() - off);
    std::span<const int64_t> idx(test_idx.data() + off, take);
    Tensor x = domain.batch(idx);
    entropy_refine(model, x, lr, steps, scope);
    // Predict this batch with the refined parameters; FullBN keeps the
    // batch statistics it just estimated (transductive normalization).
    if (scope == Scope::FullBN) {
      for (BNLayer* bn : model.bn_layers()) bn->set_mode(BNMode::Eval);
    } else {
      model.set_mode(BNMode::Eval);
    }
    Tensor logits = model.classify(model.backbone_forward(x));
    const int64_t k = logits.shape()[1];
    auto lv = logits.values();
    for (size_t i = 0; i < take; ++i) {
      const double* row = lv.data() + static_cast<int64_t>(i) * k;
      const int arg = static_cast<int>(std::max_element(row, row + k) - row);
      out.preds.push_back(arg);
      out.scores.push_back(static_cast<double>(arg));
      out.labels.push_back(domain.labels[static_cast<size_t>(idx[i])]);
    }
  }
  return metrics_from({&out, 1}, static_cast<int>(model.num_classes()), model.task_kind());
}

void export_features(Model& model, const Domain& domain, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  model.set_mode(BNMode::Eval);

  const int64_t feat_dim = model.backbone_spec().feature_dim();
  out << "sample_id,label";
  for (int64_t f = 1; f <= feat_dim; ++f) out << ",f_" << f;
  out << "\n";

  const int64_t batch = 64;
  for (int64_t off = 0; off < domain.size(); off += batch) {
    const int64_t take = std::min(batch, domain.size() - off);
    std::vector<int64_t> idx(static_cast<size_t>(take));
    for (int64_t i = 0; i < take; ++i) idx[static_cast<size_t>(i)] = off + i;
    Tensor feats = model.backbone_forward(domain.batch(idx));
    auto fv = feats.values();
    for (int64_t i = 0; i < take; ++i) {
      out << (off + i) << ',' << domain.labels[static_cast<size_t>(off + i)];
      for (int64_t f = 0; f < feat_dim; ++f) out << ',' << fmt_double(fv[i * feat_dim + f]);
      out << "\n";
    }
  }
  if (!out) throw IoError("short write to '" + path + "'");
}

namespace {

struct HistStats {
  std::vector<int64_t> counts;
  double lo = 0.0, hi = 0.0;
};

HistStats histogram(const std::vector<double>& xs, int64_t bins) {
  HistStats h;
  h.counts.assign(static_cast<size_t>(bins), 0);
  auto [mn, mx] = std::minmax_element(xs.begin(), xs.end());
  h.lo = *mn;
  h.hi = *mx;
  if (h.hi <= h.lo) {
    // degenerate range: everything lands in the first bin
    h.hi = h.lo + 1.0;
    h.counts[0] = static_cast<int64_t>(xs.size());
    return h;
  }
  const double width = (h.hi - h.lo) / static_cast<double>(bins);
  for (double x : xs) {
    auto b = static_cast<int64_t>((x - h.lo) / width);
    b = std::clamp<int64_t>(b, 0, bins - 1);
    h.counts[static_cast<size_t>(b)]++;
  }
  return h;
}

}  // namespace

void export_bn_histograms(Model& model, const Domain& domain, const std::string& layer_name,
                          int64_t channel, int64_t bins, const std::string& path) {
  if (bins < 1) throw ConfigError("histogram bins must be >= 1");
  model.set_mode(BNMode::Eval);

  // Locate the backbone block owning the named BN layer.
  int64_t block_idx = -1;
  for (size_t i = 0; i < model.blocks().size(); ++i) {
    if (model.blocks()[i].bn.name == layer_name) {
      block_idx = static_cast<int64_t>(i);
      break;
    }
  }
  if (block_idx < 0) {
    throw ConfigError("unknown backbone BN layer '" + layer_name + "' for histogram export");
  }
  if (channel < 0 || channel >= model.blocks()[static_cast<size_t>(block_idx)].bn.channels()) {
    throw ConfigError("histogram channel out of range for layer '" + layer_name + "'");
  }

  // Per-sample channel activation (spatial mean for conv maps) before and
  // after the BN layer.
  std::vector<double> pre_vals, post_vals;
  const int64_t batch = 64;
  for (int64_t off = 0; off < domain.size(); off += batch) {
    const int64_t take = std::min(batch, domain.size() - off);
    std::vector<int64_t> idx(static_cast<size_t>(take));
    for (int64_t i = 0; i < take; ++i) idx[static_cast<size_t>(i)] = off + i;
    Tensor h = domain.batch(idx);
    for (size_t bi = 0; bi < model.blocks().size(); ++bi) {
      Block& block = model.blocks()[bi];
      h = block.is_conv ? ops::conv2d_3x3(h, block.conv.weight, block.conv.bias)
                        : ops::add_channel(ops::matmul(h, block.linear.weight), block.linear.bias);
      Tensor bn_out = bn_forward(h, block.bn);
      if (static_cast<int64_t>(bi) == block_idx) {
        auto collect = [&](const Tensor& t, std::vector<double>& dst) {
          auto tv = t.values();
          const int64_t channels = t.shape()[1];
          const int64_t spatial = t.dim() == 4 ? t.shape()[2] * t.shape()[3] : 1;
          for (int64_t s = 0; s < take; ++s) {
            const double* plane = tv.data() + (s * channels + channel) * spatial;
            double sum = 0.0;
            for (int64_t p = 0; p < spatial; ++p) sum += plane[p];
            dst.push_back(sum / static_cast<double>(spatial));
          }
        };
        collect(h, pre_vals);
        collect(bn_out, post_vals);
        break;
      }
      h = ops::relu(bn_out);
    }
  }

  HistStats pre = histogram(pre_vals, bins);
  HistStats post = histogram(post_vals, bins);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "bin_index,pre_lo,pre_hi,pre_count,post_lo,post_hi,post_count\n";
  const double wp = (pre.hi - pre.lo) / static_cast<double>(bins);
  const double wq = (post.hi - post.lo) / static_cast<double>(bins);
  for (int64_t b = 0; b < bins; ++b) {
    out << b << ',' << fmt_double(pre.lo + wp * static_cast<double>(b)) << ','
        << fmt_double(pre.lo + wp * static_cast<double>(b + 1)) << ','
        << pre.counts[static_cast<size_t>(b)] << ','
        << fmt_double(post.lo + wq * static_cast<double>(b)) << ','
        << fmt_double(post.lo + wq * static_cast<double>(b + 1)) << ','
        << post.counts[static_cast<size_t>(b)] << "\n";
  }
  if (!out) throw IoError("short write to '" + path + "'");
}

}  // namespace mabn
