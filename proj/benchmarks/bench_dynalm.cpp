#include <benchmark/benchmark.h>

#include <cmath>

#include "dynalm/corpus.hpp"
#include "dynalm/ewc.hpp"
#include "dynalm/lm.hpp"
#include "dynalm/metalearner.hpp"
#include "dynalm/metatrain.hpp"
#include "dynalm/rng.hpp"

using namespace dynalm;

namespace {

// Hidden size is the benchmark argument; vocabulary and embedding follow the
// desk-scale character setup.
lm::LmConfig config_for(std::int64_t hidden) { return {40, 16, static_cast<std::size_t>(hidden), false}; }

std::vector<corpus::Batch> batches(std::size_t n, std::size_t m, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  corpus::TokenSequence seq;
  for (std::size_t k = 0; k < n * m + 1; ++k) seq.ids.push_back(static_cast<corpus::TokenId>(rng.below(vocab)));
  return corpus::make_batches(seq, m);
}

ewc::StaticMemory memory_for(const lm::Parameters& theta) {
  return ewc::consolidate(theta, std::vector<double>(theta.size(), 1e-4));
}

void BM_LossAndGrad(benchmark::State& state) {
  const auto cfg = config_for(state.range(0));
  const auto theta = lm::init_params(cfg, 1);
  const auto b = batches(1, 64, cfg.vocab_size, 2);
  const auto h = lm::HiddenState::zeros(cfg.hidden_dim);
  for (auto _ : state) benchmark::DoNotOptimize(lm::loss_and_grad(theta, b[0], h));
  state.SetItemsProcessed(state.iterations() * 64);
  state.counters["P"] = static_cast<double>(theta.size());
}
BENCHMARK(BM_LossAndGrad)->Arg(16)->Arg(64)->Arg(128)->Unit(benchmark::kMicrosecond);

void BM_Gates(benchmark::State& state) {
  const auto cfg = config_for(state.range(0));
  const auto theta = lm::init_params(cfg, 1);
  const auto memory = memory_for(theta);
  const auto b = batches(1, 64, cfg.vocab_size, 2);
  auto [out, grad] = lm::loss_and_grad(theta, b[0], lm::HiddenState::zeros(cfg.hidden_dim));
  const meta::FeatureOptions opts;
  const auto m = meta::init_meta(opts.dim(), 16, 3);
  for (auto _ : state) {
    const auto g = meta::gates(m, meta::build_features({theta, grad, out.mean_loss, &memory}, opts));
    benchmark::DoNotOptimize(meta::apply_update(theta, grad, &memory, g));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(theta.size()));
}
BENCHMARK(BM_Gates)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_MetaBackward(benchmark::State& state) {
  const auto cfg = config_for(state.range(0));
  const auto theta = lm::init_params(cfg, 1);
  const auto memory = memory_for(theta);
  const auto b = batches(1, 64, cfg.vocab_size, 2);
  auto [out, grad] = lm::loss_and_grad(theta, b[0], lm::HiddenState::zeros(cfg.hidden_dim));
  const meta::FeatureOptions opts;
  const auto m = meta::init_meta(opts.dim(), 16, 3);
  const meta::StepContext ctx{theta, grad, out.mean_loss};
  const std::vector<double> upstream(theta.size(), 1e-3);
  for (auto _ : state) benchmark::DoNotOptimize(meta::meta_backward(m, ctx, &memory, upstream, opts));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(theta.size()));
}
BENCHMARK(BM_MetaBackward)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

// One meta-gradient: forward unroll plus checkpointed backward over 40 steps.
void BM_Unroll(benchmark::State& state) {
  const auto cfg = config_for(16);
  const auto theta = lm::init_params(cfg, 1);
  const auto memory = memory_for(theta);
  const auto bs = batches(40, 64, cfg.vocab_size, 2);
  metatrain::UnrollConfig u;
  u.unroll_len = 40;
  u.checkpoint_interval = static_cast<std::size_t>(state.range(0));
  const auto m = meta::init_meta(u.features.dim(), 16, 3);
  for (auto _ : state) {
    const auto fwd = metatrain::unroll_forward(m, theta, memory, bs, lm::HiddenState::zeros(cfg.hidden_dim), u);
    benchmark::DoNotOptimize(metatrain::unroll_backward(m, memory, bs, u, fwd.state));
  }
}
BENCHMARK(BM_Unroll)->Arg(1)->Arg(6)->Arg(40)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
