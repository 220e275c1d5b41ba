#include "ipg/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ipg/common.hpp"
#include "ipg/steering.hpp"
#include "textio_internal.hpp"

namespace ipg {

namespace {

std::set<int64_t> as_set(const std::vector<int64_t>& ids, const char* side) {
  if (ids.empty())
    throw std::invalid_argument(std::string("dice: ") + side + " set is empty");
  std::set<int64_t> s(ids.begin(), ids.end());
  if (s.size() != ids.size())
    throw std::invalid_argument(std::string("dice: ") + side + " set has duplicate ids");
  return s;
}

std::string fd(double v) { return detail::format_double(v); }

void append_line(std::string& out, const std::string& line) {
  out += line;
  out += '\n';
}

}  // namespace

double dice(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
  const std::set<int64_t> sa = as_set(a, "first");
  const std::set<int64_t> sb = as_set(b, "second");
  size_t overlap = 0;
  for (int64_t id : sa) overlap += sb.count(id);
  return 2.0 * static_cast<double>(overlap) / static_cast<double>(sa.size() + sb.size());
}

double expected_random_dice(int64_t dim, int64_t top) {
  if (dim < 1 || top < 1 || top > dim)
    throw std::invalid_argument("expected_random_dice: need 1 <= top <= dim");
  // E|A ∩ B| = top^2 / dim for independent uniform top-subsets, and the sets
  // have fixed size, so E[dice] = E|A ∩ B| / top.
  return static_cast<double>(top) / static_cast<double>(dim);
}

DiceGrid dice_grid(const std::vector<std::pair<std::string, std::vector<int64_t>>>& sets) {
  if (sets.empty()) throw std::invalid_argument("dice grid: no sets given");
  const size_t n = sets.size();
  DiceGrid grid;
  grid.labels.reserve(n);
  for (const auto& [label, ids] : sets) {
    as_set(ids, label.c_str());
    grid.labels.push_back(label);
  }
  grid.values.assign(n * n, 1.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      const double v = dice(sets[i].second, sets[j].second);
      grid.values[i * n + j] = v;
      grid.values[j * n + i] = v;
    }
  return grid;
}

ProfileAccumulator::ProfileAccumulator(std::vector<int64_t> features)
    : features_(std::move(features)) {
  if (features_.empty()) throw std::invalid_argument("profile: feature list is empty");
  for (int64_t f : features_)
    if (f < 0) throw std::invalid_argument("profile: negative feature index");
  freq_sum_.assign(features_.size(), {});
}

void ProfileAccumulator::add(const Tensor& encoded, const std::vector<int>& generated) {
  if (encoded.rank() != 2)
    throw std::invalid_argument("profile: encoded activations must be rank-2");
  if (encoded.rows() != static_cast<int64_t>(generated.size()))
    throw std::invalid_argument("profile: activation rows must match generated tokens");
  for (int64_t f : features_)
    if (f >= encoded.cols())
      throw std::invalid_argument("profile: feature index exceeds activation width");

  // Steps are maximal runs of non-delimiter tokens; delimiter rows belong to
  // no step and empty runs are dropped.
  std::vector<std::pair<int64_t, int64_t>> steps;  // [begin, end)
  int64_t begin = -1;
  const int64_t rows = encoded.rows();
  for (int64_t t = 0; t <= rows; ++t) {
    const bool delim = t == rows || generated[static_cast<size_t>(t)] == tok::kStep;
    if (delim) {
      if (begin >= 0) steps.emplace_back(begin, t);
      begin = -1;
    } else if (begin < 0) {
      begin = t;
    }
  }

  const int64_t total = static_cast<int64_t>(steps.size());
  for (int64_t s = 0; s < total; ++s) {
    const double progress =
        total == 1 ? 0.0 : static_cast<double>(s) / static_cast<double>(total - 1);
    const int bin = std::min(static_cast<int>(progress * kProfileBins), kProfileBins - 1);
    const auto [lo, hi] = steps[static_cast<size_t>(s)];
    for (size_t fi = 0; fi < features_.size(); ++fi) {
      int64_t active = 0;
      for (int64_t t = lo; t < hi; ++t)
        if (encoded.at(t, features_[fi]) > 0.0) ++active;
      freq_sum_[fi][static_cast<size_t>(bin)] +=
          static_cast<double>(active) / static_cast<double>(hi - lo);
    }
    ++step_count_[static_cast<size_t>(bin)];
  }
  samples_ += total;
}

std::vector<TemporalProfile> ProfileAccumulator::finish() const {
  std::vector<TemporalProfile> out(features_.size());
  for (size_t fi = 0; fi < features_.size(); ++fi) {
    TemporalProfile& p = out[fi];
    p.feature = features_[fi];
    p.step_count = step_count_;
    p.samples = samples_;
    for (int b = 0; b < kProfileBins; ++b) {
      const size_t sb = static_cast<size_t>(b);
      p.frequency[sb] = step_count_[sb] == 0
                            ? 0.0
                            : freq_sum_[fi][sb] / static_cast<double>(step_count_[sb]);
    }
  }
  return out;
}

std::vector<TemporalProfile> temporal_profile(const Policy& policy, int layer, const Sae& sae,
                                              const std::vector<Trajectory>& trajectories,
                                              const std::vector<int64_t>& features) {
  const PolicyConfig& cfg = policy.config();
  if (layer < 0 || layer >= cfg.layers)
    throw std::invalid_argument("temporal profile: layer out of range");
  if (sae.config().input_dim != cfg.dim)
    throw std::invalid_argument("temporal profile: sae width does not match the policy");
  ProfileAccumulator acc(features);
  for (const Trajectory& traj : trajectories)
    acc.add(sae.encode(record_hidden_states(policy, traj, layer)), traj.generated);
  return acc.finish();
}

namespace {

// Ranks starting at 1, ties sharing the average rank of their run.
std::vector<double> average_ranks(const std::vector<double>& values) {
  const size_t n = values.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

bool signs_agree(double a, double b) {
  if (a == 0.0 && b == 0.0) return true;
  return (a > 0.0 && b > 0.0) || (a < 0.0 && b < 0.0);
}

size_t argmax_index(const std::vector<double>& values) {
  return static_cast<size_t>(
      std::max_element(values.begin(), values.end()) - values.begin());
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: size mismatch");
  if (x.size() < 2) throw std::invalid_argument("spearman: need at least two points");
  const std::vector<double> rx = average_ranks(x);
  const std::vector<double> ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1.0) / 2.0;
  double cov = 0.0, vx = 0.0, vy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double dx = rx[i] - mean, dy = ry[i] - mean;
    cov += dx * dy;
    vx += dx * dx;
    vy += dy * dy;
  }
  if (vx == 0.0 || vy == 0.0)
    throw std::invalid_argument("spearman: constant input has no rank ordering");
  return cov / std::sqrt(vx * vy);
}

RankingComparison compare_rankings(const AttributionScoreTable& a,
                                   const AttributionScoreTable& b,
                                   const std::vector<double>& oracle) {
  if (a.space != b.space || a.layer != b.layer)
    throw std::invalid_argument("ranking comparison: tables target different components");
  if (a.scores.empty() || a.scores.size() != b.scores.size())
    throw std::invalid_argument("ranking comparison: score widths differ");
  if (oracle.size() != a.scores.size())
    throw std::invalid_argument("ranking comparison: oracle width differs from the tables");

  RankingComparison r;
  const size_t best = argmax_index(oracle);
  r.top1_match_a = argmax_index(a.scores) == best;
  r.top1_match_b = argmax_index(b.scores) == best;
  r.top_considered = std::min<int64_t>(5, static_cast<int64_t>(a.scores.size()));
  for (int64_t i : top_p_indices(a.scores, r.top_considered))
    if (signs_agree(a.scores[static_cast<size_t>(i)], oracle[static_cast<size_t>(i)]))
      ++r.sign_matches_a;
  for (int64_t i : top_p_indices(b.scores, r.top_considered))
    if (signs_agree(b.scores[static_cast<size_t>(i)], oracle[static_cast<size_t>(i)]))
      ++r.sign_matches_b;
  r.spearman_ab = spearman(a.scores, b.scores);
  r.spearman_a_oracle = spearman(a.scores, oracle);
  r.spearman_b_oracle = spearman(b.scores, oracle);
  return r;
}

std::vector<double> ablation_oracle(const Policy& policy, int layer, const ComponentSpace& space,
                                    const std::vector<Instance>& dataset, int max_new_tokens) {
  if (dataset.empty()) throw std::invalid_argument("ablation oracle: dataset is empty");
  InterventionSpec spec;
  spec.layer = layer;
  spec.gamma = 0.0;
  spec.space = space;
  spec.components = {0};
  spec.validate_for(policy.config());

  const SignalFn signal = SignalFn::binary();
  const GenMode mode = GenMode::greedy();
  const BehaviorReport base =
      eval_behavior(policy, nullptr, dataset, signal, mode, max_new_tokens);

  const int64_t width = space.dim(policy.config().dim);
  std::vector<double> out(static_cast<size_t>(width));
  for (int64_t i = 0; i < width; ++i) {
    spec.components = {i};
    const BehaviorReport ablated =
        eval_behavior(policy, &spec, dataset, signal, mode, max_new_tokens);
    out[static_cast<size_t>(i)] = base.accuracy - ablated.accuracy;
  }
  return out;
}

namespace {

void check_grid(const DiceGrid& grid, const char* what) {
  if (grid.labels.empty())
    throw std::invalid_argument(std::string(what) + ": grid has no sets");
  if (grid.values.size() != grid.labels.size() * grid.labels.size())
    throw std::invalid_argument(std::string(what) + ": grid values are not square");
}

std::string svg_open(int width, int height) {
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
                "font-family=\"monospace\" font-size=\"11\">",
                width, height);
  return std::string(buf) + "\n";
}

}  // namespace

void save_dice_grid_csv(const std::string& path, const DiceGrid& grid) {
  check_grid(grid, "dice grid csv");
  const size_t n = grid.labels.size();
  std::string out = "set";
  for (const std::string& label : grid.labels) out += "," + label;
  out += '\n';
  for (size_t i = 0; i < n; ++i) {
    out += grid.labels[i];
    for (size_t j = 0; j < n; ++j) out += "," + fd(grid.values[i * n + j]);
    out += '\n';
  }
  write_text_file(path, out);
}

void save_dice_grid_svg(const std::string& path, const DiceGrid& grid) {
  check_grid(grid, "dice grid svg");
  const size_t n = grid.labels.size();
  const int cell = 56, left = 110, top = 24;
  const int width = left + cell * static_cast<int>(n) + 8;
  const int height = top + cell * static_cast<int>(n) + 8;
  std::string out = svg_open(width, height);
  char buf[256];
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) {
      const double v = grid.values[i * n + j];
      const int shade = static_cast<int>(std::lround(235.0 * (1.0 - v)));
      const int x = left + cell * static_cast<int>(j);
      const int y = top + cell * static_cast<int>(i);
      std::snprintf(buf, sizeof buf,
                    "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" "
                    "fill=\"rgb(%d,%d,255)\" stroke=\"white\"/>",
                    x, y, cell, cell, shade, shade);
      append_line(out, buf);
      std::snprintf(buf, sizeof buf,
                    "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\" fill=\"%s\">%.3f</text>",
                    x + cell / 2, y + cell / 2 + 4, v > 0.55 ? "white" : "black", v);
      append_line(out, buf);
    }
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"end\">%s</text>",
                  left - 6, top + cell * static_cast<int>(i) + cell / 2 + 4,
                  grid.labels[i].c_str());
    append_line(out, buf);
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%s</text>",
                  left + cell * static_cast<int>(i) + cell / 2, top - 8,
                  grid.labels[i].c_str());
    append_line(out, buf);
  }
  out += "</svg>\n";
  write_text_file(path, out);
}

void save_profiles_csv(const std::string& path, const std::vector<TemporalProfile>& profiles) {
  if (profiles.empty()) throw std::invalid_argument("profile csv: no profiles given");
  std::string out = "feature";
  for (int b = 0; b < kProfileBins; ++b) out += ",bin" + std::to_string(b);
  out += ",samples\n";
  for (const TemporalProfile& p : profiles) {
    out += std::to_string(p.feature);
    for (int b = 0; b < kProfileBins; ++b)
      out += "," + fd(p.frequency[static_cast<size_t>(b)]);
    out += "," + std::to_string(p.samples) + '\n';
  }
  write_text_file(path, out);
}

void save_profiles_svg(const std::string& path, const std::vector<TemporalProfile>& profiles) {
  if (profiles.empty()) throw std::invalid_argument("profile svg: no profiles given");
  static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  const int left = 48, top = 16, plot_w = 420, plot_h = 220;
  const int width = left + plot_w + 140;
  const int height = top + plot_h + 40;
  std::string out = svg_open(width, height);
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>", left,
                top + plot_h, left + plot_w, top + plot_h);
  append_line(out, buf);
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>", left, top,
                left, top + plot_h);
  append_line(out, buf);
  for (int b = 0; b < kProfileBins; ++b) {
    const int x = left + (plot_w * b) / (kProfileBins - 1);
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%d</text>", x,
                  top + plot_h + 16, b);
    append_line(out, buf);
  }
  for (size_t pi = 0; pi < profiles.size(); ++pi) {
    const TemporalProfile& p = profiles[pi];
    const char* color = kPalette[pi % (sizeof kPalette / sizeof kPalette[0])];
    std::string points;
    for (int b = 0; b < kProfileBins; ++b) {
      const int x = left + (plot_w * b) / (kProfileBins - 1);
      const double y = top + plot_h * (1.0 - p.frequency[static_cast<size_t>(b)]);
      std::snprintf(buf, sizeof buf, "%s%d,%s", b == 0 ? "" : " ", x, fd(y).c_str());
      points += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<polyline points=\"%s\" fill=\"none\" stroke=\"%s\" stroke-width=\"2\"/>",
                  points.c_str(), color);
    append_line(out, buf);
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" fill=\"%s\">f%lld (n=%lld)</text>",
                  left + plot_w + 10, top + 14 + 16 * static_cast<int>(pi), color,
                  static_cast<long long>(p.feature), static_cast<long long>(p.samples));
    append_line(out, buf);
  }
  out += "</svg>\n";
  write_text_file(path, out);
}

}  // namespace ipg
