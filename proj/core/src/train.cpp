#include "ipg/train.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "ipg/common.hpp"
#include "ipg/optim.hpp"
#include "policy_internal.hpp"

namespace ipg {

namespace {

// Teacher-forced rows: position p-1+t predicts target[t].
void instance_rows(const Instance& inst, std::vector<int>& toks, std::vector<int>& rows) {
  const int p = static_cast<int>(inst.prompt.size());
  const int t = static_cast<int>(inst.target.size());
  toks = inst.prompt;
  toks.insert(toks.end(), inst.target.begin(), inst.target.end() - 1);
  rows.resize(static_cast<size_t>(t));
  for (int i = 0; i < t; ++i) rows[static_cast<size_t>(i)] = p - 1 + i;
}

}  // namespace

TrainStats train_policy(Policy& policy, const std::vector<TaskSpec>& mixture,
                        const TrainOptions& opt) {
  if (mixture.empty()) throw std::invalid_argument("train: empty task mixture");
  for (const TaskSpec& spec : mixture) spec.validate();
  if (opt.steps < 0) throw std::invalid_argument("train: negative step count");
  if (opt.batch < 1) throw std::invalid_argument("train: batch must be positive");
  if (!(opt.lr > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
  if (opt.eval_instances < 0 || opt.max_new_tokens < 1)
    throw std::invalid_argument("train: bad evaluation options");

  Adam adam(opt.lr);
  std::mt19937_64 mix_rng(derive_seed(opt.seed, "train-mixture"));
  auto& params = policy.named_params();
  TrainStats stats;
  uint64_t draw = 0;
  std::vector<int> toks, rows;

  for (int step = 0; step < opt.steps; ++step) {
    std::vector<Tensor> acc;
    acc.reserve(params.size());
    for (const auto& [name, p] : params) acc.push_back(Tensor::zeros(p.shape()));
    double loss_sum = 0;
    int64_t token_count = 0;

    for (int b = 0; b < opt.batch; ++b) {
      const TaskSpec& spec =
          mixture[static_cast<size_t>(uniform_int(mix_rng, 0, static_cast<int64_t>(mixture.size()) - 1))];
      Instance inst = make_instance(spec, derive_seed(opt.seed, "train-instance", draw++));
      instance_rows(inst, toks, rows);
      if (static_cast<int>(toks.size()) > policy.config().context)
        throw std::invalid_argument("train: instance needs " + std::to_string(toks.size()) +
                                    " positions but the context window is " +
                                    std::to_string(policy.config().context));
      try {
        Tape tape;
        Tensor ce = detail::taped_selected_ce(tape, policy, toks, rows, inst.target, -1, nullptr);
        Tensor loss = tape.sum(ce);
        if (!std::isfinite(loss.item()))
          throw std::runtime_error("loss went non-finite");
        loss_sum += loss.item();
        token_count += static_cast<int64_t>(inst.target.size());
        GradMap grads = tape.backward(loss);
        for (size_t i = 0; i < params.size(); ++i) {
          Tensor g = grads.at(params[i].second);
          double* dst = acc[i].data();
          const double* src = g.data();
          for (int64_t j = 0; j < g.size(); ++j) dst[j] += src[j];
        }
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("train: step " + std::to_string(step) + ": " + e.what());
      }
    }

    const double inv = 1.0 / static_cast<double>(token_count);
    GradMap mean_grads;
    for (size_t i = 0; i < params.size(); ++i) {
      double* dst = acc[i].data();
      for (int64_t j = 0; j < acc[i].size(); ++j) dst[j] *= inv;
      mean_grads.add(params[i].second, acc[i]);
    }
    adam.step(params, mean_grads);
    stats.final_loss = loss_sum * inv;
    if (opt.log_every > 0 && ((step + 1) % opt.log_every == 0 || step + 1 == opt.steps))
      std::printf("train step %d/%d  loss %.6f\n", step + 1, opt.steps, stats.final_loss);
  }

  stats.heldout_accuracy = heldout_accuracy(policy, mixture, opt.eval_instances,
                                            derive_seed(opt.seed, "heldout"), opt.max_new_tokens);
  return stats;
}

double heldout_accuracy(const Policy& policy, const std::vector<TaskSpec>& mixture, int instances,
                        uint64_t seed, int max_new_tokens) {
  if (mixture.empty()) throw std::invalid_argument("eval: empty task mixture");
  if (instances <= 0) return 0.0;
  int correct = 0;
  for (int i = 0; i < instances; ++i) {
    const TaskSpec& spec = mixture[static_cast<size_t>(i) % mixture.size()];
    Instance inst = make_instance(spec, derive_seed(seed, "eval-instance", static_cast<uint64_t>(i)));
    Trajectory traj = generate(policy, inst.prompt, GenMode::greedy(), max_new_tokens, tok::kEos);
    if (extract_answer(traj.generated) == inst.gold) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(instances);
}

}  // namespace ipg
