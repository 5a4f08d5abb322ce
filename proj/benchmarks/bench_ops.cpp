// Microbenchmarks for the tensor primitives that dominate training time.

#include <benchmark/benchmark.h>

#include "mabn/bn.hpp"
#include "mabn/ops.hpp"
#include "mabn/rng.hpp"

using namespace mabn;

namespace {

Tensor random_tensor(Rng& rng, const Shape& shape) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.normal(0.0, 1.0);
  return Tensor::create(shape, std::move(v));
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(1);
  Tensor a = random_tensor(rng, {n, n});
  Tensor b = random_tensor(rng, {n, n});
  for (auto _ : state) {
    benchmark::DoNotOptimize(ops::matmul(a, b));
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

static void BM_Conv3x3Forward(benchmark::State& state) {
  const int64_t batch = state.range(0);
  Rng rng(1);
  Tensor x = random_tensor(rng, {batch, 16, 12, 12});
  Tensor w = random_tensor(rng, {32, 16, 3, 3});
  Tensor bias = random_tensor(rng, {32});
  for (auto _ : state) {
    benchmark::DoNotOptimize(ops::conv2d_3x3(x, w, bias));
  }
}
BENCHMARK(BM_Conv3x3Forward)->Arg(4)->Arg(24);

static void BM_Conv3x3Backward(benchmark::State& state) {
  const int64_t batch = state.range(0);
  Rng rng(1);
  Tensor w = random_tensor(rng, {32, 16, 3, 3});
  Tensor bias = random_tensor(rng, {32});
  for (auto _ : state) {
    state.PauseTiming();
    Tensor x = random_tensor(rng, {batch, 16, 12, 12});
    Tensor wg = w.detached_copy(true);
    state.ResumeTiming();
    Tensor out = ops::conv2d_3x3(x, wg, bias);
    std::vector<int64_t> axes = {0, 1, 2, 3};
    backward(ops::mean_axis(out, axes));
    benchmark::DoNotOptimize(wg);
  }
}
BENCHMARK(BM_Conv3x3Backward)->Arg(4)->Arg(24);

static void BM_BNForwardTrain(benchmark::State& state) {
  Rng rng(1);
  Tensor x = random_tensor(rng, {24, 32, 12, 12});
  BNLayer bn = BNLayer::make(32, "bn");
  for (auto _ : state) {
    benchmark::DoNotOptimize(bn_forward(x, bn));
  }
}
BENCHMARK(BM_BNForwardTrain);

static void BM_SoftmaxCE(benchmark::State& state) {
  Rng rng(1);
  Tensor logits = random_tensor(rng, {256, 16});
  std::vector<int> labels(256);
  for (auto& y : labels) y = static_cast<int>(rng.uniform_int(0, 15));
  for (auto _ : state) {
    benchmark::DoNotOptimize(ops::softmax_ce(logits, labels));
  }
}
BENCHMARK(BM_SoftmaxCE);
