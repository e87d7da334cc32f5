// SPDX-License-Identifier: Apache-2.0
#include <random>

#include <benchmark/benchmark.h>

#include "lmlite/autodiff.hpp"
#include "lmlite/eval.hpp"
#include "lmlite/objectives.hpp"

namespace {

using namespace lmlite;
using ad::Array;
using ad::Shape;

Array random_array(Shape shape, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  Array a(std::move(shape));
  for (double& v : a.data) v = nd(gen);
  return a;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Array a = random_array({n, n}, 1), b = random_array({n, n}, 2);
  for (auto _ : state) {
    ad::Graph g;
    benchmark::DoNotOptimize(ad::matmul(g.constant(a), g.constant(b)).value().data.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(32, 256);

// forward + backward through one attention call, 4 heads of 16 dims
void BM_AttentionBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Array q = random_array({4, n, 16}, 3), k = random_array({4, n, 16}, 4), v = random_array({4, n, 16}, 5);
  for (auto _ : state) {
    ad::Graph g;
    auto qv = g.leaf(q, true), kv = g.leaf(k, true), vv = g.leaf(v, true);
    g.backward(ad::sum(ad::attention(qv, kv, vv)));
    benchmark::DoNotOptimize(g.grad(qv));
  }
}
BENCHMARK(BM_AttentionBackward)->RangeMultiplier(2)->Range(16, 256);

void BM_PatchDiscrimination(benchmark::State& state) {
  const auto M = static_cast<std::size_t>(state.range(0));
  const Array p = random_array({M, 64}, 6), t = random_array({M, 64}, 7);
  std::vector<std::uint64_t> keys(M);
  for (std::size_t i = 0; i < M; ++i) keys[i] = i % 7;
  for (auto _ : state) {
    ad::Graph g;
    auto pv = g.leaf(p, true);
    g.backward(obj::patch_discrimination_loss(pv, g.constant(t), keys, 0.1));
    benchmark::DoNotOptimize(g.grad(pv));
  }
}
BENCHMARK(BM_PatchDiscrimination)->RangeMultiplier(4)->Range(64, 1024);

void BM_KnnClassify(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Array tr = random_array({n, 64}, 8), q = random_array({n / 4, 64}, 9);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 5);
  for (auto _ : state) benchmark::DoNotOptimize(eval::knn_classify(tr, labels, q, 20));
}
BENCHMARK(BM_KnnClassify)->Arg(400)->Arg(2000);

}  // namespace
BENCHMARK_MAIN();
