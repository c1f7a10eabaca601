// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <numeric>
#include <string>
#include <vector>

#include "lmort/retrieval.hpp"
#include "lmort/rng.hpp"
#include "lmort/synthetic_llm.hpp"
#include "lmort/training.hpp"
#include "lmort/tuner.hpp"

namespace {

using namespace lmort;

std::vector<LayeredStates> random_records(std::size_t count, std::size_t n, std::size_t d) {
  Rng rng(1);
  std::vector<LayeredStates> out;
  for (std::size_t i = 0; i < count; ++i) {
    LayeredStates s;
    s.sequence_id = "s" + std::to_string(i);
    s.layer_indices = {0, 1};
    for (int l = 0; l < 2; ++l) {
      MatrixF m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<float>(rng.normal());
      s.states.push_back(std::move(m));
    }
    s.attention_mask.assign(n, 1);
    out.push_back(std::move(s));
  }
  return out;
}

// args: d_llm, reduced (0/1)
void BM_TrainStep(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const bool reduced = state.range(1) != 0;
  const auto records = random_records(24, 16, d);
  const StateCache cache(records, LayerBinding{0, 1});
  std::vector<TrainExample> batch;
  for (int i = 0; i < 8; ++i) {
    batch.push_back({"s" + std::to_string(i), {"s" + std::to_string(i + 8)}, {"s" + std::to_string(i + 16)}});
  }
  TunerConfig c;
  c.n_blocks = 3;
  c.d_model = static_cast<std::uint32_t>(d);
  c.n_heads = 4;
  if (reduced) c.reduction = ReductionConfig{static_cast<std::uint32_t>(2 * d), static_cast<std::uint32_t>(d / 4)};
  TunerParams params = init_params(c, d);
  OptimizerState opt(params.size());
  TrainConfig t;
  t.negatives_per_query = 1;
  for (auto _ : state) benchmark::DoNotOptimize(train_step(batch, cache, params, opt, t));
  state.counters["params"] = static_cast<double>(count_params(c, d));
}
BENCHMARK(BM_TrainStep)->Args({64, 0})->Args({64, 1})->Args({256, 0})->Args({256, 1})->Unit(benchmark::kMillisecond);

void BM_TopK(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  std::vector<std::pair<std::string, std::vector<float>>> entries;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> v(64);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    entries.emplace_back("p" + std::to_string(i), std::move(v));
  }
  const VectorStore store = build_store(std::move(entries), SimilarityKind::Cosine);
  std::vector<double> q(64);
  for (auto& x : q) x = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(top_k(q, store, 10));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}
BENCHMARK(BM_TopK)->Arg(1000)->Arg(10000)->Arg(100000);

void BM_EmulatorEncode(benchmark::State& state) {
  const Emulator emulator = build_emulator(EmulatorConfig{});
  std::vector<std::uint32_t> tokens(static_cast<std::size_t>(state.range(0)));
  std::iota(tokens.begin(), tokens.end(), 0u);
  std::vector<std::uint32_t> layers(emulator.config().emission_points());
  std::iota(layers.begin(), layers.end(), 0u);
  for (auto _ : state) benchmark::DoNotOptimize(emulator.encode_layers("b", tokens, layers));
}
BENCHMARK(BM_EmulatorEncode)->Arg(16)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
