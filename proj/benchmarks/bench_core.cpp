#include <benchmark/benchmark.h>

#include "restorelcc/dataset.hpp"
#include "restorelcc/linalg.hpp"
#include "restorelcc/model.hpp"
#include "restorelcc/probing.hpp"
#include "restorelcc/pruning.hpp"
#include "restorelcc/util.hpp"

using namespace rlcc;

namespace {

linalg::Matrix random_matrix(uint64_t seed, int rows, int cols) {
  Rng rng(seed);
  linalg::Matrix m(rows, cols);
  for (auto& v : m.data) v = rng.next_normal();
  return m;
}

model::ModelParams toy_params() {
  static const model::ModelParams p = model::init_params(model::ModelConfig{});
  return p;
}

void BM_SvdThin(benchmark::State& state) {
  const auto m = random_matrix(1, int(state.range(0)), int(state.range(1)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(linalg::svd_thin(m));
  }
}
BENCHMARK(BM_SvdThin)->Args({200, 16})->Args({64, 32})->Args({128, 64});

void BM_ForwardToyModel(benchmark::State& state) {
  const auto p = toy_params();
  Rng rng(7);
  std::vector<int> tokens(size_t(state.range(0)), 0);
  for (auto& t : tokens) t = rng.next_below(p.config.vocab_size);
  model::Workspace<float> ws;
  for (auto _ : state) {
    model::forward_sequence(p, tokens, ws);
    benchmark::DoNotOptimize(ws.logits.data());
  }
}
BENCHMARK(BM_ForwardToyModel)->Arg(16)->Arg(32)->Arg(64);

void BM_ForwardBackwardToyModel(benchmark::State& state) {
  const auto p = toy_params();
  Rng rng(7);
  std::vector<int> tokens(size_t(state.range(0)), 0);
  for (auto& t : tokens) t = rng.next_below(p.config.vocab_size);
  model::Workspace<float> ws;
  std::vector<float> dlogits;
  auto grads = model::zeros_like(p);
  for (auto _ : state) {
    model::forward_sequence(p, tokens, ws);
    model::sequence_loss(ws, tokens, 1, &dlogits, 1.0);
    model::backward_sequence(p, tokens, ws, std::span<const float>(dlogits), grads, true);
    benchmark::DoNotOptimize(grads.tok_embed.data());
  }
}
BENCHMARK(BM_ForwardBackwardToyModel)->Arg(16)->Arg(32);

void BM_WandaScores(benchmark::State& state) {
  const auto p = toy_params();
  const auto ds = harness::gen_synthetic_task(0, 200);
  std::vector<std::vector<int>> seqs;
  for (const auto& r : ds.split(harness::Split::Train).subspan(0, 32)) {
    seqs.push_back(r.question);
  }
  const auto norms = pruning::collect_calibration_norms(p, seqs);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        pruning::compute_wanda_scores(p, norms, pruning::Targets::All));
  }
}
BENCHMARK(BM_WandaScores);

void BM_ProbeTraining(benchmark::State& state) {
  Rng rng(3);
  std::vector<probing::ProbePair> pairs(400);
  for (size_t i = 0; i < pairs.size(); ++i) {
    pairs[i].label = int(i % 2);
    pairs[i].m.resize(32);
    for (auto& v : pairs[i].m) v = rng.next_normal() + (pairs[i].label ? 0.3 : -0.3);
  }
  probing::ProbeHyper hyper;
  for (auto _ : state) {
    benchmark::DoNotOptimize(probing::train_probe(pairs, hyper));
  }
}
BENCHMARK(BM_ProbeTraining);

}  // namespace

BENCHMARK_MAIN();
