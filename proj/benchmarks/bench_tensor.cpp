#include <benchmark/benchmark.h>

#include "tiltlab/autodiff.hpp"
#include "tiltlab/rng.hpp"
#include "tiltlab/tensor.hpp"

using namespace tiltlab;

namespace {

TensorF random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  TensorF m({rows, cols});
  Rng rng(seed);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(rng.gaussian());
  return m;
}

void bm_matmul_forward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = ag::Var<float>::constant(random_matrix(n, n, 1));
  const auto b = ag::Var<float>::constant(random_matrix(n, n, 2));
  for (auto _ : state) {
    auto c = ag::matmul(a, b);
    benchmark::DoNotOptimize(c.value().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 2 * n * n * n);
}

void bm_matmul_backward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = ag::Var<float>::leaf(random_matrix(n, n, 1), true, "a");
  const auto b = ag::Var<float>::leaf(random_matrix(n, n, 2), true, "b");
  for (auto _ : state) {
    auto loss = ag::sum(ag::matmul(a, b));
    auto grads = ag::backward(loss, {a, b});
    benchmark::DoNotOptimize(grads.at("a").data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 6 * n * n * n);
}

void bm_layer_norm(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 256;
  const auto x = ag::Var<float>::constant(random_matrix(rows, d, 3));
  const auto gain = ag::Var<float>::constant(TensorF::full({d}, 1.0f));
  const auto bias = ag::Var<float>::constant(TensorF({d}));
  for (auto _ : state) {
    auto y = ag::layer_norm(x, gain, bias, 1e-5f);
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * rows * d);
}

}  // namespace

BENCHMARK(bm_matmul_forward)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_matmul_backward)->Arg(64)->Arg(128);
BENCHMARK(bm_layer_norm)->Arg(128)->Arg(1024);
