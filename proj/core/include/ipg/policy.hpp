#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ipg/tensor.hpp"

namespace ipg {

struct PolicyConfig {
  int vocab = 17;
  int context = 64;
  int layers = 2;
  int dim = 64;
  int heads = 4;
  uint64_t init_seed = 1;

  void validate() const;
};

struct GenMode {
  enum class Kind { Greedy, Sample };
  Kind kind = Kind::Greedy;
  double top_p = 0.8;
  double temperature = 0.6;
  uint64_t seed = 0;

  static GenMode greedy() { return GenMode{}; }
  static GenMode sample(double top_p, double temperature, uint64_t seed);
};

// Generated rollout. logprobs[t] is the untempered model log-probability of
// generated[t] given its prefix; the answer span indexes into `generated`
// (empty span if no answer delimiter was emitted).
struct Trajectory {
  std::vector<int> prompt;
  std::vector<int> generated;
  std::vector<double> logprobs;
  int answer_begin = 0;
  int answer_end = 0;

  int length() const { return static_cast<int>(generated.size()); }
};

// In-place transform of one residual-stream row at a fixed layer. Applied at
// every position from the first generation step onward, never at earlier
// prompt positions.
struct ResidualHook {
  int layer = 0;
  std::function<void(std::span<double>)> apply;
};

// Pre-norm transformer with learned positional embeddings. The hook point for
// recording and overrides is the residual stream at a block's output.
class Policy {
 public:
  explicit Policy(PolicyConfig config);

  const PolicyConfig& config() const { return config_; }
  std::vector<std::pair<std::string, Tensor>>& named_params() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }
  Tensor param(const std::string& name) const;
  uint64_t param_hash() const;

  void save(const std::string& path) const;
  static Policy load(const std::string& path);

 private:
  PolicyConfig config_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

Trajectory generate(const Policy& policy, const std::vector<int>& prompt, const GenMode& mode,
                    int max_new_tokens, int stop_token, const ResidualHook* hook = nullptr);

// Teacher-forced pass over the trajectory; returns the (T, dim) block-l output
// rows at the positions that produced each generated token.
Tensor record_hidden_states(const Policy& policy, const Trajectory& traj, int layer);

struct ScoreResult {
  std::vector<double> logprobs;
  // (T, dim): gradient of sum_t weights[t]*logprob[t] w.r.t. each override
  // row. Only defined when gradient weights were passed.
  Tensor override_grads;
};

// Re-scores the fixed trajectory with the layer's residual rows replaced by
// `override_rows` (shape (T, dim)) at every generated position. Passing
// `grad_weights` (size T) additionally returns gradients w.r.t. the override.
// Positions later than t cannot influence logprob[t]; those gradient entries
// are exactly zero.
ScoreResult score_with_override(const Policy& policy, const Trajectory& traj, int layer,
                                const Tensor& override_rows,
                                const std::vector<double>* grad_weights = nullptr);

}  // namespace ipg
