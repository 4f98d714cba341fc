#include <benchmark/benchmark.h>

#include "refgeo/directions.hpp"
#include "refgeo/edits.hpp"
#include "refgeo/model.hpp"
#include "refgeo/rng.hpp"
#include "refgeo/routes.hpp"
#include "refgeo/similarity.hpp"

using namespace refgeo;

namespace {

ModelConfig bench_config(int d_model) {
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = d_model;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_ff = 2 * d_model;
  c.max_seq_len = 32;
  c.rng_seed = 7;
  return c;
}

TokenSequence bench_seq(int len) {
  TokenSequence s;
  for (int i = 0; i < len; ++i) s.tokens.push_back(4 + (i * 5) % 60);
  s.role_boundary = len / 2;
  return s;
}

void BM_Forward(benchmark::State& state) {
  ModelParams p = init_params(bench_config(static_cast<int>(state.range(0))));
  TokenSequence s = bench_seq(16);
  for (auto _ : state) {
    ForwardResult fr = forward(p, s, false);
    benchmark::DoNotOptimize(fr.logits.data());
  }
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(32)->Arg(64);

void BM_Backward(benchmark::State& state) {
  ModelParams p = init_params(bench_config(static_cast<int>(state.range(0))));
  TokenSequence s = bench_seq(16);
  std::vector<int> pos;
  for (int t = s.role_boundary; t < s.length(); ++t) pos.push_back(t);
  for (auto _ : state) {
    GradientSet g = backward(p, s, pos);
    benchmark::DoNotOptimize(g.unembedding.data.data());
  }
}
BENCHMARK(BM_Backward)->Arg(16)->Arg(32);

void BM_Sample(benchmark::State& state) {
  ModelParams p = init_params(bench_config(32));
  TokenSequence prompt = bench_seq(6);
  prompt.role_boundary = 6;
  uint64_t seed = 0;
  for (auto _ : state) {
    SampleResult sr = sample(p, prompt, 8, 1.0, seed++);
    benchmark::DoNotOptimize(sr.seq.tokens.data());
  }
}
BENCHMARK(BM_Sample);

void BM_Abliterate(benchmark::State& state) {
  ModelParams p = init_params(bench_config(32));
  CounterRng rng(1, "dir");
  RefusalDirection dir;
  dir.layer = 2;
  double norm = 0.0;
  dir.vector.resize(32);
  for (double& v : dir.vector) {
    v = rng.gaussian();
    norm += v * v;
  }
  for (double& v : dir.vector) v /= std::sqrt(norm);
  for (auto _ : state) {
    ModelParams edited = abliterate(p, dir, WriterSelection{});
    benchmark::DoNotOptimize(edited.token_embedding.data.data());
  }
}
BENCHMARK(BM_Abliterate);

void BM_LinearCka(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  ActivationMatrix x, y;
  x.n = y.n = n;
  x.d = y.d = 32;
  x.data.resize(static_cast<size_t>(n) * 32);
  y.data.resize(static_cast<size_t>(n) * 32);
  CounterRng rng(3, "mat");
  for (double& v : x.data) v = rng.gaussian();
  for (double& v : y.data) v = rng.gaussian();
  for (auto _ : state) benchmark::DoNotOptimize(linear_cka(x, y));
}
BENCHMARK(BM_LinearCka)->Arg(64)->Arg(128);

void BM_Rsa(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  ActivationMatrix x, y;
  x.n = y.n = n;
  x.d = y.d = 32;
  x.data.resize(static_cast<size_t>(n) * 32);
  y.data.resize(static_cast<size_t>(n) * 32);
  CounterRng rng(4, "mat");
  for (double& v : x.data) v = rng.gaussian();
  for (double& v : y.data) v = rng.gaussian();
  for (int i = 0; i < n; ++i) {
    x.prompt_ids.push_back("p" + std::to_string(i));
    y.prompt_ids.push_back("p" + std::to_string(i));
  }
  for (auto _ : state) benchmark::DoNotOptimize(rsa(x, y));
}
BENCHMARK(BM_Rsa)->Arg(64)->Arg(128);

void BM_GrpoLoss(benchmark::State& state) {
  ModelParams p = init_params(bench_config(32));
  TokenSequence prompt = bench_seq(6);
  prompt.role_boundary = 6;
  RolloutGroup group;
  group.prompt.id = "bench";
  std::vector<double> rewards;
  for (int g = 0; g < 8; ++g) {
    SampleResult sr = sample(p, prompt, 8, 1.0, static_cast<uint64_t>(g));
    Rollout ro;
    ro.seq = sr.seq;
    ro.old_logprobs = sr.logprobs;
    ro.reward = static_cast<double>(g % 3);
    rewards.push_back(ro.reward);
    group.rollouts.push_back(ro);
  }
  std::vector<double> adv = group_advantages(rewards);
  for (size_t g = 0; g < adv.size(); ++g) group.rollouts[g].advantage = adv[g];
  for (auto _ : state) {
    GrpoLossResult res = grpo_loss(p, group, 0.2);
    benchmark::DoNotOptimize(res.loss);
  }
}
BENCHMARK(BM_GrpoLoss);

}  // namespace

BENCHMARK_MAIN();
