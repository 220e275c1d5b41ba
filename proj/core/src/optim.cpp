#include "ipg/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace ipg {

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("adam: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw std::invalid_argument("adam: epsilon must be positive");
}

void Adam::step(std::vector<std::pair<std::string, Tensor>>& params, const GradMap& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    auto it = state_.find(p.id());
    if (it == state_.end())
      it = state_.emplace(p.id(), std::make_pair(Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
               .first;
    Tensor g = grads.at(p);
    double* m = it->second.first.data();
    double* v = it->second.second.data();
    double* w = p.data();
    const double* gp = g.data();
    for (int64_t i = 0; i < p.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gp[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gp[i] * gp[i];
      w[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

}  // namespace ipg
