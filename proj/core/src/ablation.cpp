#include "mabn/ablation.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "mabn/hash.hpp"
#include "mabn/telemetry.hpp"

namespace mabn {

namespace {

PredictionSet predict_with_optional_refine(Model& model, const Domain& domain,
                                           const AblationArm& arm, const RunConfig& cfg) {
  if (arm.post_refine == PostRefine::EntropyMin) {
    // Per-test-batch entropy refinement, then prediction of that batch.
    PredictionSet out;
    out.domain_id = domain.id;
    const auto test_idx = domain.test_indices();
    const auto batch_size = static_cast<size_t>(cfg.eval.refine_batch);
    for (size_t off = 0; off < test_idx.size(); off += batch_size) {
      const size_t take = std::min(batch_size, test_idx.size() - off);
      std::span<const int64_t> idx(test_idx.data() + off, take);
      Tensor x = domain.batch(idx);
      if (cfg.eval.refine_steps > 0) {
        entropy_refine(model, x, cfg.eval_refine_lr(), cfg.eval.refine_steps, arm.scope);
      }
      if (arm.scope == Scope::FullBN) {
        // keep the batch statistics just estimated (transductive)
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
    return out;
  }
  return predict_domain(model, domain, cfg.eval.eval_batch);
}

}  // namespace

ArmRunResult run_arm(const Model& meta_model, const std::vector<Domain>& targets,
                     const AblationArm& arm, const RunConfig& cfg, uint64_t seed) {
  if (targets.empty()) throw DataError("TooFewDomains: no target domains");

  MetaConfig mcfg = cfg.meta;
  mcfg.scope = arm.scope;
  mcfg.support_size = cfg.eval_support_size();

  ArmRunResult result;
  result.arm = arm.name;
  result.seed = seed;

  const int num_classes = static_cast<int>(meta_model.num_classes());
  const TaskKind task = meta_model.task_kind();
  std::vector<PredictionSet> sets;

  if (!arm.adapt) {
    for (const auto& d : targets) {
      Model plain = meta_model.clone();
      sets.push_back(predict_with_optional_refine(plain, d, arm, cfg));
    }
  } else if (arm.assignment == Assignment::NotMatched) {
    // adapt every domain, then score with a deranged partner's snapshot
    std::vector<AffineSnapshot> snapshots;
    for (const auto& d : targets) {
      const uint64_t dom_seed = derive_seed(seed, "adapt", static_cast<uint64_t>(d.id));
      Tensor support = sample_support(d, mcfg.support_size, dom_seed);
      Model adapted = adapt_domain(meta_model, support, mcfg, dom_seed);
      snapshots.push_back(adapted.snapshot_affine());
    }
    Rng drng(derive_seed(seed, "derangement"));
    const auto perm = random_derangement(targets.size(), drng);
    for (size_t j = 0; j < targets.size(); ++j) {
      Model borrowed = meta_model.clone();
      borrowed.restore_affine(snapshots[perm[j]]);
      sets.push_back(predict_with_optional_refine(borrowed, targets[j], arm, cfg));
    }
  } else {
    for (const auto& d : targets) {
      const uint64_t dom_seed = derive_seed(seed, "adapt", static_cast<uint64_t>(d.id));
      Tensor support = sample_support(d, mcfg.support_size, dom_seed);
      Model adapted = adapt_domain(meta_model, support, mcfg, dom_seed);
      sets.push_back(predict_with_optional_refine(adapted, d, arm, cfg));
    }
  }

  for (size_t j = 0; j < sets.size(); ++j) {
    result.per_domain.push_back(metrics_from({&sets[j], 1}, num_classes, task));
    result.domain_ids.push_back(sets[j].domain_id);
  }
  result.aggregate = metrics_from(sets, num_classes, task);
  return result;
}

std::vector<ArmRunResult> run_ablation(const Model& meta_model,
                                       const std::vector<Domain>& targets,
                                       const RunConfig& cfg) {
  cfg.ablation.validate(targets.size());
  std::vector<ArmRunResult> out;
  for (const auto& arm : cfg.ablation.arms) {
    for (uint64_t seed : cfg.ablation.seeds) {
      out.push_back(run_arm(meta_model, targets, arm, cfg, seed));
    }
  }
  return out;
}

void write_metrics_csv(const std::string& path, std::span<const ArmRunResult> results) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "arm,domain_id,seed,n,acc,macro_f1,wc_acc,pearson_r\n";
  for (const auto& r : results) {
    for (size_t j = 0; j < r.per_domain.size(); ++j) {
      const Metrics& m = r.per_domain[j];
      out << r.arm << ',' << r.domain_ids[j] << ',' << r.seed << ',' << m.n_samples << ','
          << fmt_double(m.accuracy) << ',' << fmt_double(m.macro_f1) << ','
          << fmt_double(m.worst_case_accuracy) << ',' << fmt_double(m.pearson_r) << '\n';
    }
  }
  if (!out) throw IoError("short write to '" + path + "'");
}

namespace {

struct MeanStd {
  double mean = 0.0, stddev = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd ms;
  if (xs.empty()) return ms;
  for (double x : xs) ms.mean += x;
  ms.mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - ms.mean) * (x - ms.mean);
  ms.stddev = std::sqrt(ss / static_cast<double>(xs.size()));
  return ms;
}

// arm -> metric name -> per-seed values, preserving arm declaration order
struct ArmStats {
  std::vector<std::string> arm_order;
  std::map<std::string, std::map<std::string, std::vector<double>>> values;

  explicit ArmStats(std::span<const ArmRunResult> results) {
    for (const auto& r : results) {
      if (!values.count(r.arm)) arm_order.push_back(r.arm);
      auto& v = values[r.arm];
      v["acc"].push_back(r.aggregate.accuracy);
      v["macro_f1"].push_back(r.aggregate.macro_f1);
      v["wc_acc"].push_back(r.aggregate.worst_case_accuracy);
      v["pearson_r"].push_back(r.aggregate.pearson_r);
    }
  }
};

}  // namespace

void write_summary_json(const std::string& path, std::span<const ArmRunResult> results) {
  ArmStats stats(results);
  nlohmann::ordered_json j;
  for (const auto& arm : stats.arm_order) {
    nlohmann::ordered_json entry;
    for (const char* metric : {"acc", "macro_f1", "wc_acc", "pearson_r"}) {
      const MeanStd ms = mean_std(stats.values[arm][metric]);
      entry[metric] = {{"mean", ms.mean}, {"std", ms.stddev}};
    }
    entry["seeds"] = stats.values[arm]["acc"].size();
    j[arm] = entry;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("short write to '" + path + "'");
}

void write_ablation_table(const std::string& path, std::span<const ArmRunResult> results) {
  ArmStats stats(results);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "arm,acc_mean,acc_std,macro_f1_mean,macro_f1_std,wc_acc_mean,wc_acc_std,"
         "pearson_r_mean,pearson_r_std\n";
  for (const auto& arm : stats.arm_order) {
    out << arm;
    for (const char* metric : {"acc", "macro_f1", "wc_acc", "pearson_r"}) {
      const MeanStd ms = mean_std(stats.values[arm][metric]);
      out << ',' << fmt_double(ms.mean) << ',' << fmt_double(ms.stddev);
    }
    out << '\n';
  }
  if (!out) throw IoError("short write to '" + path + "'");
}

}  // namespace mabn
