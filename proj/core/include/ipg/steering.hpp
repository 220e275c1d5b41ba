#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipg/attribution.hpp"
#include "ipg/policy.hpp"
#include "ipg/sae.hpp"
#include "ipg/tasks.hpp"

namespace ipg {

// Multiplicative intervention on a fixed component set. gamma = 0 suppresses,
// gamma > 1 enhances, gamma = 1 is the identity. `components` is a set:
// duplicates are rejected.
struct InterventionSpec {
  int layer = 0;
  double gamma = 0.0;
  std::vector<int64_t> components;
  ComponentSpace space;

  void validate_for(const PolicyConfig& config) const;
};

// Generation with the layer's residual row transformed at every generated
// position before it feeds any downstream computation (prompt positions are
// untouched). Neuron space scales the selected coordinates in place; feature
// space scales the selected features and folds the change back through the
// decoder, preserving the reconstruction error term.
Trajectory intervened_generate(const Policy& policy, const InterventionSpec& spec,
                               const std::vector<int>& prompt, const GenMode& mode,
                               int max_new_tokens, int stop_token);

struct BehaviorOutcome {
  uint64_t seed = 0;  // instance seed
  double reward = 0.0;
  int length = 0;
  bool correct = false;
};

// Rollout metrics over a dataset, in dataset order. `accuracy` and
// `mean_length` are always populated; `metric`/`value` name the headline
// number implied by the signal kind.
struct BehaviorReport {
  std::string metric;  // "accuracy" | "mean-length" | "mean-reward"
  double value = 0.0;
  double accuracy = 0.0;
  double mean_length = 0.0;
  std::vector<BehaviorOutcome> outcomes;
  std::string dataset;  // instance count + content hash
  std::string decode;

  bool intervened = false;
  int layer = 0;
  std::string space;
  double gamma = 1.0;
  std::vector<int64_t> components;
};

// Rolls every instance (intervened when `spec` is non-null) and scores it.
// When `trajectories_out` is non-null it receives one rollout per instance.
BehaviorReport eval_behavior(const Policy& policy, const InterventionSpec* spec,
                             const std::vector<Instance>& dataset, const SignalFn& signal,
                             const GenMode& mode, int max_new_tokens,
                             std::vector<Trajectory>* trajectories_out = nullptr);

// Structured-text spec file, same style as score tables. Loading a
// feature-space spec requires the autoencoder handle.
void save_intervention(const std::string& path, const InterventionSpec& spec);
InterventionSpec load_intervention(const std::string& path, const Sae* sae = nullptr);

// Per-instance rows as CSV; summary (plus the intervention, if any) as JSON.
void save_behavior_csv(const std::string& path, const BehaviorReport& report);
void save_behavior_json(const std::string& path, const BehaviorReport& report);

}  // namespace ipg
