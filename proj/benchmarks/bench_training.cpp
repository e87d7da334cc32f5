// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "lmlite/config.hpp"
#include "lmlite/training.hpp"

namespace {

using namespace lmlite;

struct Desk {
  train::PretrainConfig pc;
  std::vector<data::Sample> samples;

  Desk() {
    const config::RunConfig rc;
    pc = config::pretrain_config(rc);
    const auto reg = train::effective_registry(pc);
    const auto raw = data::synth_generate(0, static_cast<std::size_t>(pc.optim.batch_size), config::generator(rc));
    samples = data::normalize(raw, data::compute_stats(raw, reg, data::StatsProvenance::Pretraining), reg);
  }
};

const Desk& desk() {
  static const Desk d;
  return d;
}

// One micro-batch of the desk configuration: tokenize, mask two views,
// encode, decode, loss and backward.
void BM_DeskMicroBatch(benchmark::State& state) {
  const Desk& d = desk();
  const auto st = train::init_state(d.pc);
  const auto mb = static_cast<std::size_t>(d.pc.optim.micro_batch_size);
  std::uint64_t stream = 0;
  for (auto _ : state) {
    auto r = train::compute_micro_batch(st, d.pc, std::span(d.samples).first(mb), stream++);
    benchmark::DoNotOptimize(r.loss.total);
  }
}
BENCHMARK(BM_DeskMicroBatch)->Unit(benchmark::kMillisecond);

// Full optimizer step; x2000 approximates a desk pretraining run.
void BM_DeskPretrainStep(benchmark::State& state) {
  const Desk& d = desk();
  auto st = train::init_state(d.pc);
  for (auto _ : state) benchmark::DoNotOptimize(train::pretrain_step(st, d.pc, d.samples).loss_total);
}
BENCHMARK(BM_DeskPretrainStep)->Unit(benchmark::kMillisecond)->Iterations(5);

void BM_SynthGenerate(benchmark::State& state) {
  const data::GeneratorConfig g;
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(data::synth_sample(seed++, 0, g).rasters.size());
}
BENCHMARK(BM_SynthGenerate)->Unit(benchmark::kMicrosecond);

}  // namespace
