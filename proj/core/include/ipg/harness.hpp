#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipg/attribution.hpp"
#include "ipg/policy.hpp"
#include "ipg/sae.hpp"
#include "ipg/tasks.hpp"
#include "ipg/train.hpp"

namespace ipg {

constexpr int kRunConfigVersion = 1;
constexpr int kManifestVersion = 1;

// Flat key-value experiment configuration. Defaults are the member
// initializers below; the file grammar and every key are documented in
// docs/formats.md. All stage randomness derives from the single root seed.
struct RunConfig {
  uint64_t seed = 1;                  // seed
  std::string out_dir = "runs/default";  // out_dir

  TaskSpec task;                      // task.kind/.modulus/.alphabet/.shift/
                                      // .len_min/.len_max/.verify_prob
  int policy_dim = 64;                // policy.dim
  int policy_layers = 2;              // policy.layers
  int policy_heads = 4;               // policy.heads
  int policy_context = 64;            // policy.context
  TrainOptions train;                 // train.steps/.batch/.lr/.eval_instances/.log_every
  int data_train_count = 256;         // data.train_count
  int data_eval_count = 200;          // data.eval_count
  int harvest_count = 96;             // harvest.count
  int sae_expansion = 16;             // sae.expansion
  int sae_topk = 32;                  // sae.topk
  SaeTrainOptions sae_train;          // sae.steps/.batch/.lr
  int attr_layer = 1;                 // attr.layer
  std::string attr_space = "neuron";  // attr.space: neuron | sae
  std::string attr_signal = "binary";  // attr.signal: binary | length
  std::string attr_baseline = "zero";  // attr.baseline: zero | mean-state | noise | self
  double attr_noise_scale = 1.0;      // attr.noise_scale
  int attr_samples = 12;              // attr.samples
  int attr_group_size = 5;            // attr.group_size
  int attr_q = 10;                    // attr.q
  double sample_top_p = 0.8;          // sample.top_p
  double sample_temperature = 0.6;    // sample.temperature
  int gen_max_new = 48;               // gen.max_new
  int select_count = 10;              // select.count
  double signal_quad_a = 0.0;         // signal.quad_a
  double signal_quad_b = 1.0;         // signal.quad_b
  double signal_quad_c = 0.0;         // signal.quad_c
  std::vector<double> gamma_grid = {0.0, 0.5, 1.0, 1.1, 1.5};  // steer.gammas
  double steer_gamma = 0.0;           // steer.gamma
  double enhance_gamma = 1.1;         // steer.enhance_gamma, must be on the grid
  double suppress_gamma = 0.0;        // steer.suppress_gamma, must be on the grid

  void validate() const;
  PolicyConfig policy_config() const;
  SignalFn signal() const;
  Baseline baseline() const;
};

// Strict parse: unknown or duplicate keys, bad values, and a missing or
// mismatched config_version are rejected naming the offending key.
RunConfig parse_run_config(const std::string& text);
std::string run_config_to_text(const RunConfig& cfg);  // canonical key order
RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& cfg);
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
uint64_t run_config_hash(const RunConfig& cfg);

// Line-oriented rollout container; logprobs round-trip bitwise.
void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajectories);
std::vector<Trajectory> load_trajectories(const std::string& path);

struct ArtifactHash {
  std::string path;  // relative to the run's output dir
  uint64_t hash = 0;
};

struct StageRecord {
  std::string stage;
  uint64_t config_hash = 0;
  int64_t wall_ms = 0;
  std::vector<ArtifactHash> inputs;
  std::vector<ArtifactHash> outputs;
};

// Per-stage provenance for a run directory. A stage is up to date when its
// record matches the current config hash and every recorded artifact still
// hashes identically on disk.
struct Manifest {
  std::vector<StageRecord> stages;

  const StageRecord* find(const std::string& stage) const;
  StageRecord& upsert(const std::string& stage);
};

Manifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const Manifest& manifest);

enum class Stage {
  TrainPolicy,
  GenData,
  Harvest,
  TrainSae,
  Attribute,
  Select,
  Steer,
  Eval,
  Analyze,
  Report,
};

constexpr int kStageCount = 10;
extern const Stage kStageOrder[kStageCount];

const char* stage_name(Stage stage);
Stage stage_from_name(const std::string& name);

// Declared artifacts, relative to cfg.out_dir. Inputs of one stage are always
// outputs of an earlier stage, so deleting a stage's outputs invalidates it
// and exactly its downstream consumers.
std::vector<std::string> stage_inputs(const RunConfig& cfg, Stage stage);
std::vector<std::string> stage_outputs(const RunConfig& cfg, Stage stage);

bool stage_up_to_date(const RunConfig& cfg, Stage stage);

// Runs one stage into cfg.out_dir, refreshing manifest.json and the config
// snapshot. Returns false when the stage was already up to date (and force is
// off). Missing inputs abort with the artifact named.
bool run_stage(const RunConfig& cfg, Stage stage, bool force = false);

// Runs every stage in order; returns how many actually executed.
int run_pipeline(const RunConfig& cfg, bool force = false);

// File names inside a run directory.
namespace artifact {
inline constexpr const char* kConfigSnapshot = "config.txt";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kPolicy = "policy.ckpt";
inline constexpr const char* kPolicyTrainStats = "policy_train.json";
inline constexpr const char* kTrainDataset = "dataset_train.txt";
inline constexpr const char* kEvalDataset = "dataset_eval.txt";
inline constexpr const char* kActivations = "activations.bin";
inline constexpr const char* kHarvestTrajectories = "harvest_trajectories.txt";
inline constexpr const char* kSae = "sae.ckpt";
inline constexpr const char* kSaeTrainStats = "sae_train.json";
inline constexpr const char* kScores = "scores.txt";
inline constexpr const char* kIntervention = "intervention.txt";
inline constexpr const char* kEvalReportCsv = "eval_report.csv";
inline constexpr const char* kEvalReportJson = "eval_report.json";
inline constexpr const char* kEvalTrajectories = "eval_trajectories.txt";
inline constexpr const char* kGammaSweepCsv = "gamma_sweep.csv";
inline constexpr const char* kGammaSweepSvg = "gamma_sweep.svg";
inline constexpr const char* kProfilesCsv = "profiles.csv";
inline constexpr const char* kProfilesSvg = "profiles.svg";
inline constexpr const char* kReportCsv = "report.csv";
inline constexpr const char* kReportJson = "report.json";

std::string steer_report_csv(double gamma);
std::string steer_report_json(double gamma);
std::string steer_trajectories(double gamma);
}  // namespace artifact

}  // namespace ipg
