#pragma once

#include <cstdint>
#include <vector>

#include "mabn/data.hpp"
#include "mabn/model.hpp"
#include "mabn/telemetry.hpp"

namespace mabn {

enum class OuterOrder : uint8_t { FirstOrder = 0 };
enum class OuterAgg : uint8_t { Sum = 0, Mean = 1 };

struct MetaConfig {
  double alpha = 3e-4;  // inner-loop LR
  double delta = 3e-5;  // outer-loop LR
  double eta = 1e-4;    // joint-training LR
  int64_t meta_batch = 4;
  double lambda = 0.1;
  int64_t support_size = 12;
  int64_t query_size = 32;
  int64_t inner_steps = 1;
  Scope scope = Scope::AffineOnly;
  OuterOrder outer_order = OuterOrder::FirstOrder;
  /// Alg.-style accumulation sums task losses and takes one delta step;
  /// Mean divides the accumulated gradient by the meta-batch size.
  OuterAgg outer_agg = OuterAgg::Sum;

  // joint-training phase
  int64_t batch_size = 24;
  int64_t plateau_window = 2;
  double plateau_tol = 1e-3;

  void validate() const;
};

/// Phase 1: joint supervised + self-supervised training on the pooled
/// source domains. Updates theta, affine parameters and running statistics
/// with Adam on ce + lambda*ssl; halves the LR when the epoch-mean loss
/// plateaus. Throws DivergenceDetected (NonFiniteError) if the loss goes
/// non-finite, DataExhausted if the pool is empty.
void train_joint(Model& model, const std::vector<Domain>& sources, const MetaConfig& cfg,
                 int64_t epochs, uint64_t seed, const TelemetrySink& sink = nullptr);

/// In-place inner SSL adaptation: `inner_steps` gradient-descent updates
/// of the scoped parameters on the support loss. FullBN scope first
/// re-estimates every BN statistic from the support batch. The model is
/// left in Frozen mode carrying the adapted state.
void run_inner_loop(Model& model, const Tensor& support, double alpha, Scope scope,
                    int64_t inner_steps, uint64_t seed);

/// Pure-function wrapper: adapts, captures (gamma~, beta~), restores the
/// model's meta-parameters (and statistics for FullBN), returns the
/// adapted snapshot. AffineOnly/FullBN scopes only.
AffineSnapshot inner_adapt(Model& model, const Tensor& support, double alpha, Scope scope,
                           int64_t inner_steps, uint64_t seed);

/// One first-order meta update over a batch of tasks: per task, adapt a
/// clone on the support set, evaluate the joint loss on the query set at
/// the adapted parameters, and accumulate the gradient (in ascending
/// domain_id order); the accumulated gradient is applied to the original
/// meta-parameters with LR delta.
void meta_step(Model& model, const std::vector<DomainTask>& tasks, const MetaConfig& cfg,
               uint64_t seed, int64_t epoch = 0, const TelemetrySink& sink = nullptr);

/// Phase 2: episodic meta-auxiliary training over the source domains.
/// Requires frozen theta for affine scopes; theta and running statistics
/// are bit-identical before and after.
void meta_train(Model& model, const std::vector<Domain>& sources, const MetaConfig& cfg,
                int64_t epochs, uint64_t seed, const TelemetrySink& sink = nullptr);

/// ce (cross-entropy or MSE per the model's task kind) on a labeled batch.
Tensor supervised_loss(Model& model, const Tensor& x, const std::vector<int>& labels);

}  // namespace mabn
