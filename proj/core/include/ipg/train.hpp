#pragma once

#include <cstdint>
#include <vector>

#include "ipg/policy.hpp"
#include "ipg/tasks.hpp"

namespace ipg {

struct TrainOptions {
  int steps = 8000;
  int batch = 8;
  double lr = 1e-3;
  uint64_t seed = 1;
  int eval_instances = 200;
  int max_new_tokens = 48;
  int log_every = 0;  // 0 silences progress lines
};

struct TrainStats {
  double final_loss = 0.0;
  double heldout_accuracy = 0.0;
};

// Supervised cross-entropy on target tokens, instances drawn uniformly from
// the mixture. Instance and held-out streams derive from opt.seed under
// distinct labels. Throws if the loss goes non-finite, reporting the step.
TrainStats train_policy(Policy& policy, const std::vector<TaskSpec>& mixture,
                        const TrainOptions& opt);

// Greedy accuracy of the binary signal over freshly drawn instances.
double heldout_accuracy(const Policy& policy, const std::vector<TaskSpec>& mixture, int instances,
                        uint64_t seed, int max_new_tokens);

}  // namespace ipg
