// End-to-end cost of the pieces the ablation harness runs repeatedly.

#include <benchmark/benchmark.h>

#include "mabn/adapt.hpp"
#include "mabn/ssl.hpp"
#include "mabn/train.hpp"

using namespace mabn;

namespace {

struct Fixture {
  DomainSet data;
  Model model;
  MetaConfig cfg;

  Fixture() {
    DomainSpec spec;
    spec.kind = GeneratorKind::ShiftedShapes;
    spec.num_classes = 4;
    spec.samples_per_domain = 64;
    spec.image_hw = 12;
    spec.seed = 3;
    data = gen_domains(spec, 4, 2);

    BackboneSpec bb;
    bb.kind = BackboneSpec::Kind::Conv3;
    bb.in_channels = 3;
    bb.image_hw = 12;
    bb.widths = {12, 24, 48};
    SSLTaskConfig ssl;
    ssl.kind = SslKind::ByolLite;
    model = Model::init(bb, 4, ssl, TaskKind::Classification, 5);
    model.set_freeze_theta(true);
    model.set_mode(BNMode::Frozen);

    cfg.support_size = 12;
    cfg.query_size = 24;
    cfg.alpha = 0.05;
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

static void BM_SslLossByol(benchmark::State& state) {
  auto& f = fixture();
  Tensor support = sample_support(f.data.targets[0], 12, 1);
  Rng rng(2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ssl_loss(f.model, support, rng));
  }
}
BENCHMARK(BM_SslLossByol);

static void BM_InnerAdapt(benchmark::State& state) {
  auto& f = fixture();
  Tensor support = sample_support(f.data.targets[0], 12, 1);
  for (auto _ : state) {
    Model clone = f.model.clone();
    run_inner_loop(clone, support, f.cfg.alpha, Scope::AffineOnly, 1, 7);
    benchmark::DoNotOptimize(clone);
  }
}
BENCHMARK(BM_InnerAdapt);

static void BM_EvaluateDomain(benchmark::State& state) {
  auto& f = fixture();
  Model clone = f.model.clone();
  for (auto _ : state) {
    benchmark::DoNotOptimize(evaluate_domain(clone, f.data.targets[0]));
  }
}
BENCHMARK(BM_EvaluateDomain);
