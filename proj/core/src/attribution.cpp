#include "ipg/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "ipg/common.hpp"
#include "textio_internal.hpp"

namespace ipg {

namespace {

Tensor baseline_rows(const Baseline& baseline, const Tensor& x, uint64_t traj_index) {
  switch (baseline.kind) {
    case Baseline::Kind::Zero:
      return Tensor::zeros(x.shape());
    case Baseline::Kind::Self:
      return x.clone();
    case Baseline::Kind::MeanState: {
      Tensor out = Tensor::zeros(x.shape());
      const int64_t rows = x.shape()[0];
      const int64_t cols = x.shape()[1];
      for (int64_t j = 0; j < cols; ++j) {
        double m = 0.0;
        for (int64_t i = 0; i < rows; ++i) m += x.at(i, j);
        m /= static_cast<double>(rows);
        for (int64_t i = 0; i < rows; ++i) out.mut(i, j) = m;
      }
      return out;
    }
    case Baseline::Kind::Noise: {
      std::mt19937_64 rng(derive_seed(baseline.seed, "baseline-noise", traj_index));
      return Tensor::randn(x.shape(), rng, baseline.noise_scale);
    }
  }
  throw std::invalid_argument("attribution: unknown baseline kind");
}

}  // namespace

std::string Baseline::tag() const {
  switch (kind) {
    case Kind::Zero: return "zero";
    case Kind::MeanState: return "mean";
    case Kind::Noise: return "noise";
    case Kind::Self: return "self";
  }
  throw std::invalid_argument("attribution: unknown baseline kind");
}

AdvantageProfile grpo_advantage(const std::vector<double>& rewards) {
  if (rewards.size() < 2)
    throw std::invalid_argument("attribution: advantage needs a group of at least two rewards");
  AdvantageProfile p;
  p.rewards = rewards;
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) {
    if (!std::isfinite(r)) throw std::invalid_argument("attribution: non-finite reward");
    mean += r;
  }
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  p.mean = mean;
  p.stddev = std::sqrt(var);
  p.advantages.assign(rewards.size(), 0.0);
  if (p.stddev >= 1e-12) {
    for (size_t i = 0; i < rewards.size(); ++i)
      p.advantages[i] = (rewards[i] - mean) / p.stddev;
  }
  return p;
}

std::vector<double> ipg_from_trajectories(const Policy& policy, int layer,
                                          const ComponentSpace& space,
                                          const std::vector<Trajectory>& trajectories,
                                          const std::vector<double>& advantages, int q,
                                          const Baseline& baseline) {
  const PolicyConfig& cfg = policy.config();
  if (trajectories.empty()) throw std::invalid_argument("attribution: no trajectories");
  if (advantages.size() != trajectories.size())
    throw std::invalid_argument("attribution: advantage count does not match trajectory count");
  if (q < 1) throw std::invalid_argument("attribution: q must be at least 1");
  if (layer < 0 || layer >= cfg.layers)
    throw std::invalid_argument("attribution: layer out of range");
  const Sae* sae = space.model;
  if (sae != nullptr && sae->config().input_dim != cfg.dim)
    throw std::invalid_argument("attribution: autoencoder width does not match residual width");

  const int64_t width = space.dim(cfg.dim);
  std::vector<double> scores(static_cast<size_t>(width), 0.0);

  Tensor dec, dec_t;
  if (sae != nullptr) {
    dec = sae->param("dec.w");
    Tape t;
    dec_t = t.transpose(dec);
  }

  for (size_t n = 0; n < trajectories.size(); ++n) {
    const double a = advantages[n];
    if (!std::isfinite(a)) throw std::invalid_argument("attribution: non-finite advantage");
    if (a == 0.0) continue;

    Tensor h = record_hidden_states(policy, trajectories[n], layer);
    const int64_t t_rows = h.shape()[0];
    std::vector<double> ones(static_cast<size_t>(t_rows), 1.0);

    // Path coordinates: residual rows, or their feature vectors with the TopK
    // support frozen for the whole path.
    Tensor x = sae != nullptr ? sae->encode(h) : h;
    Tensor b = baseline_rows(baseline, x, static_cast<uint64_t>(n));

    Tensor g_avg = Tensor::zeros({t_rows, width});
    for (int k = 1; k <= q; ++k) {
      const double alpha = static_cast<double>(k) / q;
      Tensor xk = Tensor::zeros(x.shape());
      for (int64_t i = 0; i < x.size(); ++i)
        xk.data()[i] = b.data()[i] + alpha * (x.data()[i] - b.data()[i]);

      Tensor ov;
      if (sae == nullptr) {
        ov = xk;
      } else {
        // Residual-space image of the feature path point: the decoder is
        // linear, so the reconstruction error term stays fixed along the path.
        Tensor df = Tensor::zeros(x.shape());
        for (int64_t i = 0; i < x.size(); ++i) df.data()[i] = xk.data()[i] - x.data()[i];
        Tape t;
        ov = t.add(h, t.matmul(df, dec));
      }

      ScoreResult r = score_with_override(policy, trajectories[n], layer, ov, &ones);
      Tensor g = r.override_grads;
      if (sae != nullptr) {
        Tape t;
        g = t.matmul(g, dec_t);
      }
      for (int64_t i = 0; i < g_avg.size(); ++i) g_avg.data()[i] += g.data()[i];
    }

    const double inv_q = 1.0 / static_cast<double>(q);
    for (int64_t t = 0; t < t_rows; ++t)
      for (int64_t i = 0; i < width; ++i)
        scores[static_cast<size_t>(i)] += a * (x.at(t, i) - b.at(t, i)) * g_avg.at(t, i) * inv_q;
  }

  const double inv_n = 1.0 / static_cast<double>(trajectories.size());
  for (double& s : scores) s *= inv_n;
  return scores;
}

namespace {

GroupAttribution run_group(const Policy& policy, int layer, const ComponentSpace& space,
                           const Instance& instance, const SignalFn& signal,
                           const IpgOptions& opt, int q) {
  if (opt.group_size < 2)
    throw std::invalid_argument("attribution: group size must be at least 2");
  if (q < 1) throw std::invalid_argument("attribution: q must be at least 1");
  if (opt.max_new_tokens < 1)
    throw std::invalid_argument("attribution: max_new_tokens must be positive");

  GroupAttribution out;
  std::vector<double> rewards;
  for (int n = 0; n < opt.group_size; ++n) {
    GenMode mode = GenMode::sample(opt.top_p, opt.temperature,
                                   derive_seed(opt.seed, "group", static_cast<uint64_t>(n)));
    Trajectory traj = generate(policy, instance.prompt, mode, opt.max_new_tokens, tok::kEos);
    rewards.push_back(eval_signal(signal, traj.generated, instance.gold));
    out.trajectories.push_back(std::move(traj));
  }
  out.advantage = grpo_advantage(rewards);
  out.scores = ipg_from_trajectories(policy, layer, space, out.trajectories,
                                     out.advantage.advantages, q, opt.baseline);
  return out;
}

}  // namespace

GroupAttribution ipg_sample(const Policy& policy, int layer, const ComponentSpace& space,
                            const Instance& instance, const SignalFn& signal,
                            const IpgOptions& opt) {
  return run_group(policy, layer, space, instance, signal, opt, opt.q);
}

GroupAttribution pg_sample(const Policy& policy, int layer, const ComponentSpace& space,
                           const Instance& instance, const SignalFn& signal,
                           const IpgOptions& opt) {
  return run_group(policy, layer, space, instance, signal, opt, 1);
}

std::vector<int64_t> top_p_indices(const std::vector<double>& scores, int64_t p) {
  const int64_t d = static_cast<int64_t>(scores.size());
  if (p < 1 || p > d) throw std::invalid_argument("attribution: selection size out of range");
  for (double s : scores)
    if (!std::isfinite(s)) throw std::invalid_argument("attribution: non-finite score");
  std::vector<int64_t> idx(static_cast<size_t>(d));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  idx.resize(static_cast<size_t>(p));
  return idx;
}

AttributionScoreTable aggregate_and_select(const std::vector<AttributionScoreTable>& per_sample,
                                           int64_t p) {
  if (per_sample.empty()) throw std::invalid_argument("attribution: nothing to aggregate");
  const AttributionScoreTable& head = per_sample.front();
  if (head.scores.empty()) throw std::invalid_argument("attribution: empty score table");

  AttributionScoreTable out = head;
  out.scores.assign(head.scores.size(), 0.0);
  out.samples = 0;
  double total_weight = 0.0;
  for (const AttributionScoreTable& t : per_sample) {
    if (t.layer != head.layer || t.space != head.space || t.signal != head.signal)
      throw std::invalid_argument("attribution: aggregation inputs describe different runs");
    if (t.scores.size() != head.scores.size())
      throw std::invalid_argument("attribution: aggregation inputs have different widths");
    if (t.samples < 1)
      throw std::invalid_argument("attribution: table sample count must be positive");
    const double w = static_cast<double>(t.samples);
    for (size_t i = 0; i < t.scores.size(); ++i) out.scores[i] += w * t.scores[i];
    total_weight += w;
    out.samples += t.samples;
  }
  for (double& s : out.scores) s /= total_weight;
  out.selected = top_p_indices(out.scores, p);
  return out;
}

namespace {

constexpr const char* kTableHeader = "ipg-score-table v1";
constexpr const char* kTableCtx = "score table";

// Empty string means the table is well-formed.
std::string table_problem(const AttributionScoreTable& t) {
  if (t.scores.empty()) return "no scores";
  const int64_t d = static_cast<int64_t>(t.scores.size());
  for (double s : t.scores)
    if (!std::isfinite(s)) return "non-finite score";
  if (static_cast<int64_t>(t.selected.size()) > d) return "selection larger than table";
  for (int64_t idx : t.selected)
    if (idx < 0 || idx >= d) return "selected index out of range";
  for (const std::string* s : {&t.space, &t.signal, &t.baseline}) {
    if (s->empty()) return "missing descriptor";
    if (s->find_first_of(" \t\n") != std::string::npos) return "descriptor contains whitespace";
  }
  if (t.layer < 0 || t.samples < 1 || t.group_size < 1 || t.q < 1) return "invalid descriptor";
  return "";
}

int64_t parse_int(const std::string& text, const std::string& what) {
  return detail::parse_int(text, kTableCtx, what);
}

}  // namespace

void save_score_table(const std::string& path, const AttributionScoreTable& table) {
  const std::string problem = table_problem(table);
  if (!problem.empty()) throw std::invalid_argument("score table: " + problem);

  std::string out;
  out += kTableHeader;
  out += "\nlayer " + std::to_string(table.layer);
  out += "\nspace " + table.space;
  out += "\nsignal " + table.signal;
  out += "\nbaseline " + table.baseline;
  out += "\nsamples " + std::to_string(table.samples);
  out += "\ngroup_size " + std::to_string(table.group_size);
  out += "\nq " + std::to_string(table.q);
  out += "\ncomponents " + std::to_string(table.scores.size());
  out += "\nselected";
  for (int64_t idx : table.selected) out += " " + std::to_string(idx);
  out += "\nscores\n";
  for (double s : table.scores) out += detail::format_double(s) + "\n";
  write_text_file(path, out);
}

AttributionScoreTable load_score_table(const std::string& path) {
  std::istringstream in(read_text_file(path));

  if (detail::next_line(in, kTableCtx, "header") != kTableHeader)
    throw std::runtime_error("score table: unsupported header in " + path);

  AttributionScoreTable t;
  t.layer = static_cast<int>(parse_int(detail::keyed_value(in, kTableCtx, "layer"), "layer"));
  t.space = detail::keyed_value(in, kTableCtx, "space");
  t.signal = detail::keyed_value(in, kTableCtx, "signal");
  t.baseline = detail::keyed_value(in, kTableCtx, "baseline");
  t.samples =
      static_cast<int>(parse_int(detail::keyed_value(in, kTableCtx, "samples"), "samples"));
  t.group_size = static_cast<int>(
      parse_int(detail::keyed_value(in, kTableCtx, "group_size"), "group_size"));
  t.q = static_cast<int>(parse_int(detail::keyed_value(in, kTableCtx, "q"), "q"));
  const int64_t d = parse_int(detail::keyed_value(in, kTableCtx, "components"), "components");
  if (d < 1) throw std::runtime_error("score table: bad component count");

  const std::string sel_line = detail::next_line(in, kTableCtx, "selected");
  if (sel_line != "selected") {
    if (sel_line.compare(0, 9, "selected ") != 0)
      throw std::runtime_error("score table: expected 'selected' line");
    std::istringstream sel(sel_line.substr(9));
    std::string tokn;
    while (sel >> tokn) t.selected.push_back(parse_int(tokn, "selected"));
  }

  if (detail::next_line(in, kTableCtx, "scores") != "scores")
    throw std::runtime_error("score table: expected 'scores' line");
  t.scores.reserve(static_cast<size_t>(d));
  for (int64_t i = 0; i < d; ++i)
    t.scores.push_back(
        detail::parse_double(detail::next_line(in, kTableCtx, "score entries"), kTableCtx,
                             "scores"));

  detail::expect_eof(in, kTableCtx, path);

  const std::string problem = table_problem(t);
  if (!problem.empty()) throw std::runtime_error("score table: " + problem + " in " + path);
  return t;
}

}  // namespace ipg
