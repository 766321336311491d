#include <benchmark/benchmark.h>

#include "mmcl/gaussian.hpp"
#include "mmcl/optim.hpp"
#include "mmcl/tensor.hpp"

namespace {

using namespace mmcl;

void BM_MatmulForward(benchmark::State& state) {
  RngStream rng(7, "bench");
  Tensor a = Tensor::randn({64, 32}, rng);
  Tensor b = Tensor::randn({32, 32}, rng);
  for (auto _ : state) {
    Tensor c = ops::matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
}
BENCHMARK(BM_MatmulForward);

void BM_MatmulBackward(benchmark::State& state) {
  RngStream rng(7, "bench");
  for (auto _ : state) {
    state.PauseTiming();
    Parameter a("a", Tensor::randn({64, 32}, rng));
    Parameter b("b", Tensor::randn({32, 32}, rng));
    Tensor loss = ops::sum_all(ops::matmul(a.value, b.value));
    state.ResumeTiming();
    loss.backward();
    benchmark::DoNotOptimize(a.value.grad().data());
  }
}
BENCHMARK(BM_MatmulBackward);

void BM_SoftmaxRows(benchmark::State& state) {
  RngStream rng(7, "bench");
  Tensor a = Tensor::randn({256, 32}, rng);
  for (auto _ : state) {
    Tensor p = ops::softmax(a);
    benchmark::DoNotOptimize(p.data().data());
  }
}
BENCHMARK(BM_SoftmaxRows);

void BM_GaussianFitSample(benchmark::State& state) {
  RngStream rng(7, "bench");
  std::vector<float> rows = rng.normals(200 * 32);
  for (auto _ : state) {
    GaussianModel g = GaussianModel::fit(rows, 32);
    RngStream draw(11, "draw");
    auto s = g.sample(32, draw);
    benchmark::DoNotOptimize(s.data());
  }
}
BENCHMARK(BM_GaussianFitSample);

}  // namespace
