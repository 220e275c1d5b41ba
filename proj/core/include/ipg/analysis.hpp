#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ipg/attribution.hpp"
#include "ipg/policy.hpp"
#include "ipg/sae.hpp"
#include "ipg/tasks.hpp"

namespace ipg {

// 2|A ∩ B| / (|A| + |B|) over duplicate-free index sets.
double dice(const std::vector<int64_t>& a, const std::vector<int64_t>& b);

// Expected Dice of two independent uniform p-subsets of {0..d-1}:
// E|A ∩ B| = p^2/d, so E[Dice] = p/d.
double expected_random_dice(int64_t d, int64_t p);

struct DiceGrid {
  std::vector<std::string> labels;
  std::vector<double> values;  // row-major labels.size()^2, diagonal 1
};

DiceGrid dice_grid(const std::vector<std::pair<std::string, std::vector<int64_t>>>& sets);

constexpr int kProfileBins = 8;

// Per-feature activation frequency over normalized reasoning progress. A step
// is a maximal run of generated tokens between step-delimiter tokens; step i
// of S maps to progress (i-1)/(S-1), binned into 8 equal-width bins
// (single-step trajectories land in bin 0). A feature is active on a token
// when its encoded value is strictly positive.
struct TemporalProfile {
  int64_t feature = 0;
  std::array<double, kProfileBins> frequency{};   // mean per-step active fraction
  std::array<int64_t, kProfileBins> step_count{};  // steps contributing per bin
  int64_t samples = 0;                             // total steps seen
};

// Accumulates profiles one trajectory at a time; duplicating a trajectory
// leaves the finished frequencies unchanged.
class ProfileAccumulator {
 public:
  explicit ProfileAccumulator(std::vector<int64_t> features);

  // f holds the (T, m) feature rows for the trajectory's T generated tokens.
  void add(const Tensor& f, const std::vector<int>& generated);
  std::vector<TemporalProfile> finish() const;

 private:
  std::vector<int64_t> features_;
  std::vector<std::array<double, kProfileBins>> freq_sum_;
  std::array<int64_t, kProfileBins> step_count_{};
  int64_t samples_ = 0;
};

std::vector<TemporalProfile> temporal_profile(const Policy& policy, int layer, const Sae& sae,
                                              const std::vector<Trajectory>& trajectories,
                                              const std::vector<int64_t>& features);

// Rank correlation with average ranks for ties. Throws on constant input.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Agreement of two score tables against a ground-truth effect vector
// (typically the exhaustive ablation oracle). Sign agreement is counted over
// each table's own top-5 components.
struct RankingComparison {
  bool top1_match_a = false;
  bool top1_match_b = false;
  int top_considered = 0;
  int sign_matches_a = 0;
  int sign_matches_b = 0;
  double spearman_ab = 0.0;
  double spearman_a_oracle = 0.0;
  double spearman_b_oracle = 0.0;
};

RankingComparison compare_rankings(const AttributionScoreTable& a, const AttributionScoreTable& b,
                                   const std::vector<double>& oracle);

// Exhaustive single-component zero ablation: oracle[i] is the greedy-accuracy
// drop caused by zeroing component i, i.e. baseline accuracy minus ablated
// accuracy (positive = the component helps the task).
std::vector<double> ablation_oracle(const Policy& policy, int layer, const ComponentSpace& space,
                                    const std::vector<Instance>& dataset, int max_new_tokens);

// Deterministic text artifacts: CSV matrices and minimal standalone SVG.
void save_dice_grid_csv(const std::string& path, const DiceGrid& grid);
void save_dice_grid_svg(const std::string& path, const DiceGrid& grid);
void save_profiles_csv(const std::string& path, const std::vector<TemporalProfile>& profiles);
void save_profiles_svg(const std::string& path, const std::vector<TemporalProfile>& profiles);

}  // namespace ipg
