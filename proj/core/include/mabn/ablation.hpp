#pragma once

#include <string>
#include <vector>

#include "mabn/adapt.hpp"
#include "mabn/config.hpp"

namespace mabn {

/// One (arm, seed) evaluation: per-target-domain metrics plus the pooled
/// aggregate.
struct ArmRunResult {
  std::string arm;
  uint64_t seed = 0;
  std::vector<Metrics> per_domain;  // single-domain metrics, target order
  std::vector<int32_t> domain_ids;
  Metrics aggregate;
};

/// Evaluates one ablation arm at one seed against the target domains.
/// Adaptation always starts from a fresh clone of `meta_model`.
ArmRunResult run_arm(const Model& meta_model, const std::vector<Domain>& targets,
                     const AblationArm& arm, const RunConfig& cfg, uint64_t seed);

/// Every arm in the plan across all plan seeds, in declaration order.
std::vector<ArmRunResult> run_ablation(const Model& meta_model,
                                       const std::vector<Domain>& targets, const RunConfig& cfg);

/// Raw per-(arm, domain, seed) rows:
/// arm,domain_id,seed,n,acc,macro_f1,wc_acc,pearson_r
void write_metrics_csv(const std::string& path, std::span<const ArmRunResult> results);

/// {arm -> {metric -> {mean, std}}} across seeds of the aggregate metrics.
void write_summary_json(const std::string& path, std::span<const ArmRunResult> results);

/// Consolidated arm x metric table with mean and std columns.
void write_ablation_table(const std::string& path, std::span<const ArmRunResult> results);

}  // namespace mabn
