#include "ipg/steering.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "ipg/common.hpp"
#include "textio_internal.hpp"

namespace ipg {

namespace {

constexpr const char* kSpecHeader = "ipg-intervention v1";
constexpr const char* kSpecCtx = "intervention";

void check_component_set(const std::vector<int64_t>& components) {
  if (components.empty()) throw std::invalid_argument("intervention: empty component set");
  std::vector<int64_t> sorted = components;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw std::invalid_argument("intervention: duplicate component index");
  if (sorted.front() < 0)
    throw std::invalid_argument("intervention: component index out of range");
}

void check_gamma(double gamma) {
  if (!std::isfinite(gamma) || gamma < 0.0)
    throw std::invalid_argument("intervention: scaling factor must be finite and non-negative");
}

std::string describe_mode(const GenMode& mode) {
  if (mode.kind == GenMode::Kind::Greedy) return "greedy";
  std::string out = "sample top_p=";
  out += detail::format_double(mode.top_p);
  out += " temperature=";
  out += detail::format_double(mode.temperature);
  out += " seed=" + std::to_string(mode.seed);
  return out;
}

std::string describe_dataset(const std::vector<Instance>& dataset) {
  uint64_t h = fnv1a64("behavior-dataset");
  for (const Instance& inst : dataset) {
    h = splitmix64(h ^ fnv1a64(inst.prompt.data(), inst.prompt.size() * sizeof(int)));
    h = splitmix64(h ^ fnv1a64(inst.gold.data(), inst.gold.size() * sizeof(int)));
  }
  return "n=" + std::to_string(dataset.size()) + " hash=" + hex64(h);
}

}  // namespace

void InterventionSpec::validate_for(const PolicyConfig& config) const {
  check_component_set(components);
  check_gamma(gamma);
  if (layer < 0 || layer >= config.layers)
    throw std::invalid_argument("intervention: layer out of range");
  if (space.is_features() && space.model->config().input_dim != config.dim)
    throw std::invalid_argument(
        "intervention: autoencoder width does not match the residual width");
  const int64_t width = space.dim(config.dim);
  for (int64_t idx : components)
    if (idx >= width) throw std::invalid_argument("intervention: component index out of range");
}

Trajectory intervened_generate(const Policy& policy, const InterventionSpec& spec,
                               const std::vector<int>& prompt, const GenMode& mode,
                               int max_new_tokens, int stop_token) {
  spec.validate_for(policy.config());

  ResidualHook hook;
  hook.layer = spec.layer;
  if (spec.space.is_features()) {
    const Sae* sae = spec.space.model;
    hook.apply = [sae, &spec](std::span<double> row) {
      Tensor z = Tensor::zeros({1, static_cast<int64_t>(row.size())});
      std::copy(row.begin(), row.end(), z.data());
      Tensor out = sae->steer_features(z, spec.components, spec.gamma);
      std::copy(out.data(), out.data() + row.size(), row.begin());
    };
  } else {
    hook.apply = [&spec](std::span<double> row) {
      for (int64_t i : spec.components) row[static_cast<size_t>(i)] *= spec.gamma;
    };
  }
  return generate(policy, prompt, mode, max_new_tokens, stop_token, &hook);
}

BehaviorReport eval_behavior(const Policy& policy, const InterventionSpec* spec,
                             const std::vector<Instance>& dataset, const SignalFn& signal,
                             const GenMode& mode, int max_new_tokens,
                             std::vector<Trajectory>* trajectories_out) {
  if (dataset.empty()) throw std::invalid_argument("behavior: empty dataset");
  if (spec != nullptr) spec->validate_for(policy.config());
  if (trajectories_out != nullptr) trajectories_out->clear();

  BehaviorReport rep;
  rep.dataset = describe_dataset(dataset);
  rep.decode = describe_mode(mode);

  const SignalFn correctness = SignalFn::binary();
  double correct_total = 0.0;
  double length_total = 0.0;
  double reward_total = 0.0;
  for (const Instance& inst : dataset) {
    Trajectory traj =
        spec != nullptr
            ? intervened_generate(policy, *spec, inst.prompt, mode, max_new_tokens, tok::kEos)
            : generate(policy, inst.prompt, mode, max_new_tokens, tok::kEos);
    BehaviorOutcome o;
    o.seed = inst.seed;
    o.reward = eval_signal(signal, traj.generated, inst.gold);
    o.length = traj.length();
    o.correct = eval_signal(correctness, traj.generated, inst.gold) == 1.0;
    correct_total += o.correct ? 1.0 : 0.0;
    length_total += static_cast<double>(o.length);
    reward_total += o.reward;
    rep.outcomes.push_back(o);
    if (trajectories_out != nullptr) trajectories_out->push_back(std::move(traj));
  }

  const double n = static_cast<double>(dataset.size());
  rep.accuracy = correct_total / n;
  rep.mean_length = length_total / n;
  switch (signal.kind) {
    case SignalKind::Binary:
      rep.metric = "accuracy";
      rep.value = rep.accuracy;
      break;
    case SignalKind::Length:
      rep.metric = "mean-length";
      rep.value = rep.mean_length;
      break;
    case SignalKind::Pluggable:
      rep.metric = "mean-reward";
      rep.value = reward_total / n;
      break;
  }

  if (spec != nullptr) {
    rep.intervened = true;
    rep.layer = spec->layer;
    rep.space = spec->space.tag();
    rep.gamma = spec->gamma;
    rep.components = spec->components;
  }
  return rep;
}

void save_intervention(const std::string& path, const InterventionSpec& spec) {
  check_component_set(spec.components);
  check_gamma(spec.gamma);
  if (spec.layer < 0) throw std::invalid_argument("intervention: negative layer");

  std::string out;
  out += kSpecHeader;
  out += "\nlayer " + std::to_string(spec.layer);
  out += "\nspace " + spec.space.tag();
  out += "\ngamma " + detail::format_double(spec.gamma);
  out += "\nindices";
  for (int64_t idx : spec.components) out += " " + std::to_string(idx);
  out += "\n";
  write_text_file(path, out);
}

InterventionSpec load_intervention(const std::string& path, const Sae* sae) {
  std::istringstream in(read_text_file(path));

  if (detail::next_line(in, kSpecCtx, "header") != kSpecHeader)
    throw std::runtime_error("intervention: unsupported header in " + path);

  InterventionSpec spec;
  spec.layer =
      static_cast<int>(detail::parse_int(detail::keyed_value(in, kSpecCtx, "layer"), kSpecCtx,
                                         "layer"));
  const std::string space = detail::keyed_value(in, kSpecCtx, "space");
  if (space == "neuron") {
    spec.space = ComponentSpace::neuron();
  } else if (space == "sae") {
    if (sae == nullptr)
      throw std::invalid_argument("intervention: feature-space spec needs an autoencoder");
    spec.space = ComponentSpace::features(*sae);
  } else {
    throw std::runtime_error("intervention: unknown space '" + space + "' in " + path);
  }
  spec.gamma = detail::parse_double(detail::keyed_value(in, kSpecCtx, "gamma"), kSpecCtx,
                                    "gamma");
  std::istringstream idx(detail::keyed_value(in, kSpecCtx, "indices"));
  std::string tokn;
  while (idx >> tokn)
    spec.components.push_back(detail::parse_int(tokn, kSpecCtx, "indices"));
  detail::expect_eof(in, kSpecCtx, path);

  if (spec.layer < 0) throw std::runtime_error("intervention: negative layer in " + path);
  try {
    check_component_set(spec.components);
    check_gamma(spec.gamma);
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string(e.what()) + " in " + path);
  }
  return spec;
}

void save_behavior_csv(const std::string& path, const BehaviorReport& report) {
  std::string out = "index,seed,reward,length,correct\n";
  for (size_t i = 0; i < report.outcomes.size(); ++i) {
    const BehaviorOutcome& o = report.outcomes[i];
    out += std::to_string(i);
    out += "," + std::to_string(o.seed);
    out += "," + detail::format_double(o.reward);
    out += "," + std::to_string(o.length);
    out += o.correct ? ",1\n" : ",0\n";
  }
  write_text_file(path, out);
}

void save_behavior_json(const std::string& path, const BehaviorReport& report) {
  nlohmann::json j;
  j["metric"] = report.metric;
  j["value"] = report.value;
  j["accuracy"] = report.accuracy;
  j["mean_length"] = report.mean_length;
  j["count"] = report.outcomes.size();
  j["dataset"] = report.dataset;
  j["decode"] = report.decode;
  j["intervened"] = report.intervened;
  if (report.intervened) {
    j["intervention"] = {{"layer", report.layer},
                         {"space", report.space},
                         {"gamma", report.gamma},
                         {"components", report.components}};
  }
  write_text_file(path, j.dump(2) + "\n");
}

}  // namespace ipg
