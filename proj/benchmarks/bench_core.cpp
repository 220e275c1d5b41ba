#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ipg/attribution.hpp"
#include "ipg/policy.hpp"
#include "ipg/sae.hpp"
#include "ipg/tasks.hpp"
#include "ipg/tensor.hpp"

namespace {

using namespace ipg;

void bm_matmul_forward(benchmark::State& state) {
  const int64_t n = state.range(0);
  std::mt19937_64 rng(7);
  const Tensor a = Tensor::randn({n, n}, rng, 1.0);
  const Tensor b = Tensor::randn({n, n}, rng, 1.0);
  for (auto _ : state) {
    Tape tape;
    Tensor c = tape.matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

void bm_matmul_backward(benchmark::State& state) {
  const int64_t n = state.range(0);
  std::mt19937_64 rng(7);
  const Tensor a = Tensor::randn({n, n}, rng, 1.0, true);
  const Tensor b = Tensor::randn({n, n}, rng, 1.0, true);
  for (auto _ : state) {
    Tape tape;
    Tensor loss = tape.sum(tape.matmul(a, b));
    GradMap grads = tape.backward(loss);
    benchmark::DoNotOptimize(grads.at(a).data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

Policy bench_policy() {
  PolicyConfig cfg;
  cfg.dim = 64;
  cfg.layers = 2;
  cfg.heads = 4;
  cfg.context = 64;
  cfg.init_seed = 3;
  return Policy(cfg);
}

void bm_generate_greedy(benchmark::State& state) {
  const Policy policy = bench_policy();
  TaskSpec spec;
  spec.kind = TaskKind::ModArithChain;
  const Instance inst = make_instance(spec, 11);
  const int max_new = static_cast<int>(state.range(0));
  int64_t tokens = 0;
  for (auto _ : state) {
    Trajectory traj = generate(policy, inst.prompt, GenMode::greedy(), max_new, tok::kEos);
    tokens += static_cast<int64_t>(traj.generated.size());
    benchmark::DoNotOptimize(traj.generated.data());
  }
  state.SetItemsProcessed(tokens);
}

void bm_score_with_override_grad(benchmark::State& state) {
  const Policy policy = bench_policy();
  TaskSpec spec;
  spec.kind = TaskKind::ModArithChain;
  const Instance inst = make_instance(spec, 11);
  const Trajectory traj = generate(policy, inst.prompt, GenMode::greedy(), 32, tok::kEos);
  const Tensor rows = record_hidden_states(policy, traj, 1);
  const std::vector<double> weights(traj.generated.size(), 1.0);
  for (auto _ : state) {
    ScoreResult r = score_with_override(policy, traj, 1, rows, &weights);
    benchmark::DoNotOptimize(r.override_grads.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(traj.generated.size()));
}

void bm_sae_encode(benchmark::State& state) {
  SaeConfig cfg;
  cfg.input_dim = 64;
  cfg.expansion = 16;
  cfg.topk = 32;
  const Sae sae(cfg);
  std::mt19937_64 rng(5);
  const int64_t rows = state.range(0);
  const Tensor z = Tensor::randn({rows, cfg.input_dim}, rng, 1.0);
  for (auto _ : state) {
    Tensor f = sae.encode(z);
    benchmark::DoNotOptimize(f.data());
  }
  state.SetItemsProcessed(state.iterations() * rows);
}

void bm_ipg_attribution(benchmark::State& state) {
  const Policy policy = bench_policy();
  TaskSpec spec;
  spec.kind = TaskKind::ModArithChain;
  const Instance inst = make_instance(spec, 11);
  std::vector<Trajectory> trajs;
  for (int n = 0; n < 2; ++n)
    trajs.push_back(generate(policy, inst.prompt, GenMode::sample(0.8, 0.6, 40 + n), 16,
                             tok::kEos));
  const std::vector<double> adv = {1.0, -1.0};
  const int q = static_cast<int>(state.range(0));
  for (auto _ : state) {
    std::vector<double> scores =
        ipg_from_trajectories(policy, 1, ComponentSpace::neuron(), trajs, adv, q,
                              Baseline::zero());
    benchmark::DoNotOptimize(scores.data());
  }
}

BENCHMARK(bm_matmul_forward)->Arg(64)->Arg(256);
BENCHMARK(bm_matmul_backward)->Arg(64)->Arg(256);
BENCHMARK(bm_generate_greedy)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_score_with_override_grad)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_sae_encode)->Arg(64)->Arg(1024);
BENCHMARK(bm_ipg_attribution)->Arg(1)->Arg(10)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
