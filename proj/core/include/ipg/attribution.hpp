#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipg/policy.hpp"
#include "ipg/sae.hpp"
#include "ipg/tasks.hpp"

namespace ipg {

// Group-relative advantages: (r - mean) / population std, or all zeros when
// the group is degenerate (std below 1e-12).
struct AdvantageProfile {
  std::vector<double> rewards;
  std::vector<double> advantages;
  double mean = 0.0;
  double stddev = 0.0;

  int64_t size() const { return static_cast<int64_t>(rewards.size()); }
};

AdvantageProfile grpo_advantage(const std::vector<double>& rewards);

// Attribution coordinates: raw residual neurons, or autoencoder features with
// gradients chained through the decoder. The model pointer is borrowed and
// must outlive the calls that use it.
struct ComponentSpace {
  const Sae* model = nullptr;

  static ComponentSpace neuron() { return {}; }
  static ComponentSpace features(const Sae& sae) { return {&sae}; }
  bool is_features() const { return model != nullptr; }
  int64_t dim(int residual_dim) const {
    return is_features() ? model->config().features() : residual_dim;
  }
  std::string tag() const { return is_features() ? "sae" : "neuron"; }
};

// Reference point x' of the path x' + alpha (x - x'). In feature space the
// baseline lives in feature coordinates. `self` pins x' = x (zero scores by
// construction; used to exercise that invariant).
struct Baseline {
  enum class Kind { Zero, MeanState, Noise, Self };
  Kind kind = Kind::Zero;
  uint64_t seed = 0;
  double noise_scale = 1.0;

  static Baseline zero() { return {}; }
  static Baseline mean_state() { return {Kind::MeanState, 0, 1.0}; }
  static Baseline noise(uint64_t seed, double scale) { return {Kind::Noise, seed, scale}; }
  static Baseline self() { return {Kind::Self, 0, 1.0}; }
  std::string tag() const;
};

struct IpgOptions {
  int group_size = 5;
  int q = 10;
  double top_p = 0.8;
  double temperature = 0.6;
  uint64_t seed = 0;
  int max_new_tokens = 48;
  Baseline baseline;
};

// Right-endpoint Riemann estimate over fixed rollouts:
//   score_i = (1/N) sum_n A_n sum_t (x - x')_{t,i} (1/q) sum_{k=1..q} g_{t,i}(k/q)
// where g(alpha) is the gradient of sum_t' log pi(a_t') w.r.t. coordinate
// (t, i) evaluated at x' + alpha (x - x'). Trajectories with exactly zero
// advantage contribute nothing and are skipped.
std::vector<double> ipg_from_trajectories(const Policy& policy, int layer,
                                          const ComponentSpace& space,
                                          const std::vector<Trajectory>& trajectories,
                                          const std::vector<double>& advantages, int q,
                                          const Baseline& baseline);

struct GroupAttribution {
  std::vector<Trajectory> trajectories;
  AdvantageProfile advantage;
  std::vector<double> scores;
};

// Samples a GRPO group from the instance prompt (trajectory n uses a seed
// derived from opt.seed and n), rewards it with `signal`, and integrates.
GroupAttribution ipg_sample(const Policy& policy, int layer, const ComponentSpace& space,
                            const Instance& instance, const SignalFn& signal,
                            const IpgOptions& opt);

// Raw policy-gradient comparator: the identical pipeline with the single path
// node alpha = 1, i.e. gradients at the sampled states themselves.
GroupAttribution pg_sample(const Policy& policy, int layer, const ComponentSpace& space,
                           const Instance& instance, const SignalFn& signal,
                           const IpgOptions& opt);

struct AttributionScoreTable {
  int layer = 0;
  std::string space;     // "neuron" | "sae"
  std::string signal;    // "binary" | "length" | "custom"
  std::string baseline;  // baseline tag
  int samples = 0;       // prompts aggregated into `scores`
  int group_size = 0;
  int q = 0;
  std::vector<double> scores;
  std::vector<int64_t> selected;  // top-p components, best first
};

// Indices of the p largest values, best first, ties toward the lower index.
std::vector<int64_t> top_p_indices(const std::vector<double>& scores, int64_t p);

// Sample-count-weighted mean of the input tables (fixed left-to-right order)
// plus a fresh top-p selection. Inputs must agree on layer, space, signal and
// width; the remaining descriptor fields are carried from the first table.
AttributionScoreTable aggregate_and_select(const std::vector<AttributionScoreTable>& per_sample,
                                           int64_t p);

// Versioned plain-text score table, one score per line at full precision.
void save_score_table(const std::string& path, const AttributionScoreTable& table);
AttributionScoreTable load_score_table(const std::string& path);

}  // namespace ipg
