#pragma once

#include <unordered_map>
#include <utility>

#include "ipg/tensor.hpp"

namespace ipg {

// Adam with bias correction; state keyed by parameter storage identity.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(std::vector<std::pair<std::string, Tensor>>& params, const GradMap& grads);
  int64_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::unordered_map<uint64_t, std::pair<Tensor, Tensor>> state_;
};

}  // namespace ipg
