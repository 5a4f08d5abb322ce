#pragma once

#include <string>
#include <vector>

#include "mabn/data.hpp"
#include "mabn/metrics.hpp"
#include "mabn/model.hpp"
#include "mabn/rng.hpp"
#include "mabn/train.hpp"

namespace mabn {

/// Test-time adaptation: a clone of the meta model with the inner loop run
/// on the unlabeled support batch; the meta model is never touched. The
/// returned model is in Eval mode.
Model adapt_domain(const Model& meta_model, const Tensor& support, const MetaConfig& cfg,
                   uint64_t seed);

/// Raw predictions of one domain's test split.
struct PredictionSet {
  int32_t domain_id = 0;
  std::vector<int> preds;
  std::vector<int> labels;
  std::vector<double> scores;  // argmax class (classification) or head output (regression)
};

PredictionSet predict_domain(Model& model, const Domain& domain, int64_t eval_batch = 64);

/// Pooled metrics over one or more domains; worst_case_* are the minimum
/// per-domain values.
Metrics metrics_from(std::span<const PredictionSet> sets, int num_classes, TaskKind task);

/// Full-test-split metrics of a single domain.
Metrics evaluate_domain(Model& model, const Domain& domain, int64_t eval_batch = 64);

/// Uniformly random permutation of {0..n-1} without fixed points.
std::vector<size_t> random_derangement(size_t n, Rng& rng);

struct MatchedShuffleResult {
  Metrics no_adapt;
  Metrics not_matched;
  Metrics matched;
  std::vector<AffineSnapshot> snapshots;  // adapted (gamma~, beta~) per target domain
  std::vector<size_t> derangement;        // not_matched assignment, derangement[j] != j
};

/// Adapts every target domain, then scores three arms: each domain with
/// its own snapshot (Matched), with a deranged other domain's snapshot
/// (NotMatched), and with the raw meta parameters (NoAdapt).
MatchedShuffleResult run_matched_shuffle(const Model& meta_model,
                                         const std::vector<Domain>& targets,
                                         const MetaConfig& cfg, uint64_t seed);

/// Minimizes the mean softmax prediction entropy of `batch`, updating only
/// affine parameters. FullBN scope re-estimates every BN statistic from
/// the batch first; AffineOnly keeps the stored statistics.
void entropy_refine(Model& model, const Tensor& batch, double lr, int64_t steps, Scope scope);

/// Per-test-batch entropy refinement followed by prediction of that batch;
/// affine updates accumulate across batches within the domain (use a fresh
/// clone per domain to reset).
Metrics evaluate_domain_with_refine(Model& model, const Domain& domain, double lr, int64_t steps,
                                    Scope scope, int64_t eval_batch = 16);

/// CSV of backbone features: header sample_id,label,f_1..f_d.
void export_features(Model& model, const Domain& domain, const std::string& path);

/// CSV histogram of one backbone BN channel's per-sample activation
/// (spatial mean for conv features) before and after the BN layer.
/// Columns: bin_index,pre_lo,pre_hi,pre_count,post_lo,post_hi,post_count.
void export_bn_histograms(Model& model, const Domain& domain, const std::string& layer_name,
                          int64_t channel, int64_t bins, const std::string& path);

}  // namespace mabn
