#include "ipg/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ipg/analysis.hpp"
#include "ipg/checkpoint.hpp"
#include "ipg/common.hpp"
#include "ipg/steering.hpp"
#include "textio_internal.hpp"

namespace fs = std::filesystem;

namespace ipg {

namespace {

constexpr const char* kConfigCtx = "run config";
constexpr const char* kTrajCtx = "trajectory file";

std::string trim(const std::string& s) {
  const size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int to_int(const std::string& value, const std::string& key) {
  const int64_t v = detail::parse_int(value, kConfigCtx, key);
  if (v < INT32_MIN || v > INT32_MAX)
    throw std::runtime_error(std::string(kConfigCtx) + ": " + key + " out of range");
  return static_cast<int>(v);
}

uint64_t to_seed(const std::string& value, const std::string& key) {
  const int64_t v = detail::parse_int(value, kConfigCtx, key);
  if (v < 0) throw std::runtime_error(std::string(kConfigCtx) + ": " + key + " must be >= 0");
  return static_cast<uint64_t>(v);
}

std::vector<double> parse_gamma_list(const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string part;
  while (std::getline(ss, part, ','))
    out.push_back(detail::parse_double(trim(part), kConfigCtx, "steer.gammas"));
  if (out.empty())
    throw std::runtime_error(std::string(kConfigCtx) + ": steer.gammas is empty");
  return out;
}

std::string gamma_list_to_text(const std::vector<double>& gammas) {
  std::string out;
  for (size_t i = 0; i < gammas.size(); ++i) {
    if (i) out += ',';
    out += detail::format_double(gammas[i]);
  }
  return out;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument("run config: " + message);
}

}  // namespace

void RunConfig::validate() const {
  require(!out_dir.empty(), "out_dir is empty");
  task.validate();
  policy_config().validate();
  require(attr_layer >= 0 && attr_layer < policy_layers, "attr.layer out of range");
  require(attr_space == "neuron" || attr_space == "sae", "attr.space must be neuron or sae");
  require(attr_signal == "binary" || attr_signal == "length",
          "attr.signal must be binary or length");
  require(attr_baseline == "zero" || attr_baseline == "mean-state" ||
              attr_baseline == "noise" || attr_baseline == "self",
          "attr.baseline must be zero, mean-state, noise or self");
  require(std::isfinite(attr_noise_scale) && attr_noise_scale > 0.0,
          "attr.noise_scale must be positive");
  require(train.steps >= 1 && train.batch >= 1 && train.eval_instances >= 1,
          "train.steps, train.batch and train.eval_instances must be >= 1");
  require(std::isfinite(train.lr) && train.lr > 0.0, "train.lr must be positive");
  require(sae_expansion >= 1 && sae_topk >= 1, "sae.expansion and sae.topk must be >= 1");
  require(sae_topk <= sae_expansion * policy_dim, "sae.topk exceeds the feature count");
  require(sae_train.steps >= 1 && sae_train.batch >= 1,
          "sae.steps and sae.batch must be >= 1");
  require(std::isfinite(sae_train.lr) && sae_train.lr > 0.0, "sae.lr must be positive");
  require(data_train_count >= 1 && data_eval_count >= 1,
          "data.train_count and data.eval_count must be >= 1");
  require(harvest_count >= 1 && harvest_count <= data_train_count,
          "harvest.count must be in [1, data.train_count]");
  require(attr_samples >= 1 && attr_samples <= data_eval_count,
          "attr.samples must be in [1, data.eval_count]");
  require(attr_group_size >= 2, "attr.group_size must be >= 2");
  require(attr_q >= 1, "attr.q must be >= 1");
  require(sample_top_p > 0.0 && sample_top_p <= 1.0, "sample.top_p must be in (0, 1]");
  require(std::isfinite(sample_temperature) && sample_temperature > 0.0,
          "sample.temperature must be positive");
  require(gen_max_new >= 1, "gen.max_new must be >= 1");
  const int64_t width =
      attr_space == "sae" ? static_cast<int64_t>(sae_expansion) * policy_dim : policy_dim;
  require(select_count >= 1 && select_count <= width,
          "select.count must be in [1, component width]");
  require(std::isfinite(signal_quad_a) && std::isfinite(signal_quad_b) &&
              std::isfinite(signal_quad_c),
          "signal coefficients must be finite");
  require(!gamma_grid.empty(), "steer.gammas is empty");
  for (double g : gamma_grid)
    require(std::isfinite(g) && g >= 0.0, "steer.gammas entries must be >= 0");
  require(std::isfinite(steer_gamma) && steer_gamma >= 0.0, "steer.gamma must be >= 0");
  const auto on_grid = [&](double g) {
    return std::find(gamma_grid.begin(), gamma_grid.end(), g) != gamma_grid.end();
  };
  require(on_grid(enhance_gamma), "steer.enhance_gamma is not on steer.gammas");
  require(on_grid(suppress_gamma), "steer.suppress_gamma is not on steer.gammas");
}

PolicyConfig RunConfig::policy_config() const {
  PolicyConfig pc;
  pc.vocab = tok::kVocab;
  pc.context = policy_context;
  pc.layers = policy_layers;
  pc.dim = policy_dim;
  pc.heads = policy_heads;
  pc.init_seed = derive_seed(seed, "policy-init");
  return pc;
}

SignalFn RunConfig::signal() const {
  if (attr_signal == "length")
    return SignalFn::length(signal_quad_a, signal_quad_b, signal_quad_c);
  return SignalFn::binary();
}

Baseline RunConfig::baseline() const {
  if (attr_baseline == "mean-state") return Baseline::mean_state();
  if (attr_baseline == "noise")
    return Baseline::noise(derive_seed(seed, "attr-baseline"), attr_noise_scale);
  if (attr_baseline == "self") return Baseline::self();
  return Baseline::zero();
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto d = [&] { return detail::parse_double(value, kConfigCtx, key); };
  if (key == "seed") cfg.seed = to_seed(value, key);
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "task.kind") cfg.task.kind = task_kind_from_name(value);
  else if (key == "task.modulus") cfg.task.modulus = to_int(value, key);
  else if (key == "task.alphabet") cfg.task.alphabet = to_int(value, key);
  else if (key == "task.shift") cfg.task.shift = to_int(value, key);
  else if (key == "task.len_min") cfg.task.len_min = to_int(value, key);
  else if (key == "task.len_max") cfg.task.len_max = to_int(value, key);
  else if (key == "task.verify_prob") cfg.task.verify_prob = d();
  else if (key == "policy.dim") cfg.policy_dim = to_int(value, key);
  else if (key == "policy.layers") cfg.policy_layers = to_int(value, key);
  else if (key == "policy.heads") cfg.policy_heads = to_int(value, key);
  else if (key == "policy.context") cfg.policy_context = to_int(value, key);
  else if (key == "train.steps") cfg.train.steps = to_int(value, key);
  else if (key == "train.batch") cfg.train.batch = to_int(value, key);
  else if (key == "train.lr") cfg.train.lr = d();
  else if (key == "train.eval_instances") cfg.train.eval_instances = to_int(value, key);
  else if (key == "train.log_every") cfg.train.log_every = to_int(value, key);
  else if (key == "data.train_count") cfg.data_train_count = to_int(value, key);
  else if (key == "data.eval_count") cfg.data_eval_count = to_int(value, key);
  else if (key == "harvest.count") cfg.harvest_count = to_int(value, key);
  else if (key == "sae.expansion") cfg.sae_expansion = to_int(value, key);
  else if (key == "sae.topk") cfg.sae_topk = to_int(value, key);
  else if (key == "sae.steps") cfg.sae_train.steps = to_int(value, key);
  else if (key == "sae.batch") cfg.sae_train.batch = to_int(value, key);
  else if (key == "sae.lr") cfg.sae_train.lr = d();
  else if (key == "attr.layer") cfg.attr_layer = to_int(value, key);
  else if (key == "attr.space") cfg.attr_space = value;
  else if (key == "attr.signal") cfg.attr_signal = value;
  else if (key == "attr.baseline") cfg.attr_baseline = value;
  else if (key == "attr.noise_scale") cfg.attr_noise_scale = d();
  else if (key == "attr.samples") cfg.attr_samples = to_int(value, key);
  else if (key == "attr.group_size") cfg.attr_group_size = to_int(value, key);
  else if (key == "attr.q") cfg.attr_q = to_int(value, key);
  else if (key == "sample.top_p") cfg.sample_top_p = d();
  else if (key == "sample.temperature") cfg.sample_temperature = d();
  else if (key == "gen.max_new") cfg.gen_max_new = to_int(value, key);
  else if (key == "select.count") cfg.select_count = to_int(value, key);
  else if (key == "signal.quad_a") cfg.signal_quad_a = d();
  else if (key == "signal.quad_b") cfg.signal_quad_b = d();
  else if (key == "signal.quad_c") cfg.signal_quad_c = d();
  else if (key == "steer.gammas") cfg.gamma_grid = parse_gamma_list(value);
  else if (key == "steer.gamma") cfg.steer_gamma = d();
  else if (key == "steer.enhance_gamma") cfg.enhance_gamma = d();
  else if (key == "steer.suppress_gamma") cfg.suppress_gamma = d();
  else
    throw std::runtime_error(std::string(kConfigCtx) + ": unknown key '" + key + "'");
}

std::string run_config_to_text(const RunConfig& cfg) {
  const auto fd = [](double v) { return detail::format_double(v); };
  std::string out;
  const auto line = [&](const std::string& key, const std::string& value) {
    out += key + " = " + value + '\n';
  };
  line("config_version", std::to_string(kRunConfigVersion));
  line("seed", std::to_string(cfg.seed));
  line("out_dir", cfg.out_dir);
  line("task.kind", task_kind_name(cfg.task.kind));
  line("task.modulus", std::to_string(cfg.task.modulus));
  line("task.alphabet", std::to_string(cfg.task.alphabet));
  line("task.shift", std::to_string(cfg.task.shift));
  line("task.len_min", std::to_string(cfg.task.len_min));
  line("task.len_max", std::to_string(cfg.task.len_max));
  line("task.verify_prob", fd(cfg.task.verify_prob));
  line("policy.dim", std::to_string(cfg.policy_dim));
  line("policy.layers", std::to_string(cfg.policy_layers));
  line("policy.heads", std::to_string(cfg.policy_heads));
  line("policy.context", std::to_string(cfg.policy_context));
  line("train.steps", std::to_string(cfg.train.steps));
  line("train.batch", std::to_string(cfg.train.batch));
  line("train.lr", fd(cfg.train.lr));
  line("train.eval_instances", std::to_string(cfg.train.eval_instances));
  line("train.log_every", std::to_string(cfg.train.log_every));
  line("data.train_count", std::to_string(cfg.data_train_count));
  line("data.eval_count", std::to_string(cfg.data_eval_count));
  line("harvest.count", std::to_string(cfg.harvest_count));
  line("sae.expansion", std::to_string(cfg.sae_expansion));
  line("sae.topk", std::to_string(cfg.sae_topk));
  line("sae.steps", std::to_string(cfg.sae_train.steps));
  line("sae.batch", std::to_string(cfg.sae_train.batch));
  line("sae.lr", fd(cfg.sae_train.lr));
  line("attr.layer", std::to_string(cfg.attr_layer));
  line("attr.space", cfg.attr_space);
  line("attr.signal", cfg.attr_signal);
  line("attr.baseline", cfg.attr_baseline);
  line("attr.noise_scale", fd(cfg.attr_noise_scale));
  line("attr.samples", std::to_string(cfg.attr_samples));
  line("attr.group_size", std::to_string(cfg.attr_group_size));
  line("attr.q", std::to_string(cfg.attr_q));
  line("sample.top_p", fd(cfg.sample_top_p));
  line("sample.temperature", fd(cfg.sample_temperature));
  line("gen.max_new", std::to_string(cfg.gen_max_new));
  line("select.count", std::to_string(cfg.select_count));
  line("signal.quad_a", fd(cfg.signal_quad_a));
  line("signal.quad_b", fd(cfg.signal_quad_b));
  line("signal.quad_c", fd(cfg.signal_quad_c));
  line("steer.gammas", gamma_list_to_text(cfg.gamma_grid));
  line("steer.gamma", fd(cfg.steer_gamma));
  line("steer.enhance_gamma", fd(cfg.enhance_gamma));
  line("steer.suppress_gamma", fd(cfg.suppress_gamma));
  return out;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  bool versioned = false;
  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    const std::string stripped = trim(raw);
    if (stripped.empty() || stripped[0] == '#') continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(std::string(kConfigCtx) + ": expected 'key = value', got '" +
                               stripped + "'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error(std::string(kConfigCtx) + ": empty key");
    if (!seen.insert(key).second)
      throw std::runtime_error(std::string(kConfigCtx) + ": duplicate key '" + key + "'");
    if (key == "config_version") {
      const int64_t v = detail::parse_int(value, kConfigCtx, key);
      if (v != kRunConfigVersion)
        throw std::runtime_error(std::string(kConfigCtx) + ": config_version " +
                                 std::to_string(v) + " unsupported (expected " +
                                 std::to_string(kRunConfigVersion) + ")");
      versioned = true;
      continue;
    }
    apply_override(cfg, key, value);
  }
  if (!versioned)
    throw std::runtime_error(std::string(kConfigCtx) + ": missing config_version");
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  try {
    return parse_run_config(read_text_file(path));
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  write_text_file(path, run_config_to_text(cfg));
}

uint64_t run_config_hash(const RunConfig& cfg) {
  const std::string text = run_config_to_text(cfg);
  return fnv1a64(text.data(), text.size());
}

void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajectories) {
  std::string out = "ipg-trajectories v1\n";
  out += "count " + std::to_string(trajectories.size()) + '\n';
  for (const Trajectory& t : trajectories) {
    if (t.prompt.empty()) throw std::invalid_argument("trajectory save: empty prompt");
    if (t.logprobs.size() != t.generated.size())
      throw std::invalid_argument("trajectory save: logprob count mismatch");
    if (t.answer_begin < 0 || t.answer_begin > t.answer_end ||
        t.answer_end > static_cast<int>(t.generated.size()))
      throw std::invalid_argument("trajectory save: bad answer span");
    for (double lp : t.logprobs)
      if (!std::isfinite(lp))
        throw std::invalid_argument("trajectory save: non-finite logprob");
    out += "prompt";
    for (int tokn : t.prompt) out += ' ' + std::to_string(tokn);
    out += "\ngenerated";
    for (int tokn : t.generated) out += ' ' + std::to_string(tokn);
    out += "\nlogprobs";
    for (double lp : t.logprobs) out += ' ' + detail::format_double(lp);
    out += "\nanswer " + std::to_string(t.answer_begin) + ' ' +
           std::to_string(t.answer_end) + '\n';
  }
  write_text_file(path, out);
}

namespace {

// Splits "key v0 v1 ..." and checks the leading key.
std::vector<std::string> fields_of(const std::string& line, const std::string& key) {
  std::istringstream ss(line);
  std::vector<std::string> parts;
  std::string part;
  while (ss >> part) parts.push_back(part);
  if (parts.empty() || parts[0] != key)
    throw std::runtime_error(std::string(kTrajCtx) + ": expected '" + key + "' line");
  parts.erase(parts.begin());
  return parts;
}

std::vector<int> token_fields(const std::string& line, const std::string& key) {
  std::vector<int> out;
  for (const std::string& part : fields_of(line, key))
    out.push_back(static_cast<int>(detail::parse_int(part, kTrajCtx, key)));
  return out;
}

}  // namespace

std::vector<Trajectory> load_trajectories(const std::string& path) {
  std::istringstream in(read_text_file(path));
  if (detail::next_line(in, kTrajCtx, "header") != "ipg-trajectories v1")
    throw std::runtime_error(std::string(kTrajCtx) + ": bad header in " + path);
  const int64_t count =
      detail::parse_int(detail::keyed_value(in, kTrajCtx, "count"), kTrajCtx, "count");
  if (count < 0) throw std::runtime_error(std::string(kTrajCtx) + ": negative count");
  std::vector<Trajectory> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    Trajectory t;
    t.prompt = token_fields(detail::next_line(in, kTrajCtx, "prompt"), "prompt");
    if (t.prompt.empty()) throw std::runtime_error(std::string(kTrajCtx) + ": empty prompt");
    t.generated = token_fields(detail::next_line(in, kTrajCtx, "generated"), "generated");
    for (const std::string& part :
         fields_of(detail::next_line(in, kTrajCtx, "logprobs"), "logprobs"))
      t.logprobs.push_back(detail::parse_double(part, kTrajCtx, "logprobs"));
    if (t.logprobs.size() != t.generated.size())
      throw std::runtime_error(std::string(kTrajCtx) + ": logprob count mismatch");
    const std::vector<int> span = token_fields(detail::next_line(in, kTrajCtx, "answer"), "answer");
    if (span.size() != 2)
      throw std::runtime_error(std::string(kTrajCtx) + ": answer span needs two fields");
    t.answer_begin = span[0];
    t.answer_end = span[1];
    if (t.answer_begin < 0 || t.answer_begin > t.answer_end ||
        t.answer_end > static_cast<int>(t.generated.size()))
      throw std::runtime_error(std::string(kTrajCtx) + ": bad answer span");
    out.push_back(std::move(t));
  }
  detail::expect_eof(in, kTrajCtx, path);
  return out;
}

const StageRecord* Manifest::find(const std::string& stage) const {
  for (const StageRecord& r : stages)
    if (r.stage == stage) return &r;
  return nullptr;
}

StageRecord& Manifest::upsert(const std::string& stage) {
  for (StageRecord& r : stages)
    if (r.stage == stage) return r;
  stages.push_back(StageRecord{stage, 0, 0, {}, {}});
  return stages.back();
}

namespace {

nlohmann::json artifacts_to_json(const std::vector<ArtifactHash>& items) {
  nlohmann::json arr = nlohmann::json::array();
  for (const ArtifactHash& a : items)
    arr.push_back({{"path", a.path}, {"hash", hex64(a.hash)}});
  return arr;
}

uint64_t parse_hex64(const std::string& text, const char* what) {
  if (text.empty()) throw std::runtime_error(std::string("manifest: empty ") + what);
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(text.c_str(), &end, 16);
  if (errno != 0 || end != text.c_str() + text.size())
    throw std::runtime_error(std::string("manifest: bad ") + what + " '" + text + "'");
  return static_cast<uint64_t>(v);
}

std::vector<ArtifactHash> artifacts_from_json(const nlohmann::json& arr, const char* what) {
  std::vector<ArtifactHash> out;
  for (const nlohmann::json& item : arr)
    out.push_back({item.at("path").get<std::string>(),
                   parse_hex64(item.at("hash").get<std::string>(), what)});
  return out;
}

}  // namespace

void save_manifest(const std::string& path, const Manifest& manifest) {
  nlohmann::json j;
  j["version"] = kManifestVersion;
  nlohmann::json stages = nlohmann::json::array();
  for (const StageRecord& r : manifest.stages) {
    stages.push_back({{"stage", r.stage},
                      {"config_hash", hex64(r.config_hash)},
                      {"wall_ms", r.wall_ms},
                      {"inputs", artifacts_to_json(r.inputs)},
                      {"outputs", artifacts_to_json(r.outputs)}});
  }
  j["stages"] = std::move(stages);
  write_text_file(path, j.dump(2) + "\n");
}

Manifest load_manifest(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest: " + std::string(e.what()));
  }
  try {
    const int64_t version = j.at("version").get<int64_t>();
    if (version != kManifestVersion)
      throw std::runtime_error("manifest version " + std::to_string(version) +
                               " unsupported (expected " + std::to_string(kManifestVersion) +
                               ")");
    Manifest m;
    for (const nlohmann::json& s : j.at("stages")) {
      StageRecord r;
      r.stage = s.at("stage").get<std::string>();
      r.config_hash = parse_hex64(s.at("config_hash").get<std::string>(), "config hash");
      r.wall_ms = s.at("wall_ms").get<int64_t>();
      r.inputs = artifacts_from_json(s.at("inputs"), "input hash");
      r.outputs = artifacts_from_json(s.at("outputs"), "output hash");
      m.stages.push_back(std::move(r));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest: " + std::string(e.what()));
  }
}

const Stage kStageOrder[kStageCount] = {
    Stage::TrainPolicy, Stage::GenData, Stage::Harvest, Stage::TrainSae, Stage::Attribute,
    Stage::Select,      Stage::Steer,   Stage::Eval,    Stage::Analyze,  Stage::Report,
};

const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::TrainPolicy: return "train-policy";
    case Stage::GenData: return "gen-data";
    case Stage::Harvest: return "harvest";
    case Stage::TrainSae: return "train-sae";
    case Stage::Attribute: return "attribute";
    case Stage::Select: return "select";
    case Stage::Steer: return "steer";
    case Stage::Eval: return "eval";
    case Stage::Analyze: return "analyze";
    case Stage::Report: return "report";
  }
  throw std::invalid_argument("unknown stage");
}

Stage stage_from_name(const std::string& name) {
  for (Stage s : kStageOrder)
    if (name == stage_name(s)) return s;
  throw std::invalid_argument("unknown stage '" + name + "'");
}

namespace {

// Shortest text that parses back to the same double; for file names and plot
// labels, not for data files.
std::string short_double(double v) {
  char buf[32];
  const std::to_chars_result res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

namespace artifact {

std::string steer_report_csv(double gamma) {
  return "steer_g" + short_double(gamma) + "_report.csv";
}
std::string steer_report_json(double gamma) {
  return "steer_g" + short_double(gamma) + "_report.json";
}
std::string steer_trajectories(double gamma) {
  return "steer_g" + short_double(gamma) + "_trajectories.txt";
}

}  // namespace artifact

namespace {

bool uses_sae(const RunConfig& cfg) { return cfg.attr_space == "sae"; }

std::string join(const RunConfig& cfg, const std::string& rel) {
  return (fs::path(cfg.out_dir) / rel).string();
}

}  // namespace

std::vector<std::string> stage_inputs(const RunConfig& cfg, Stage stage) {
  using namespace artifact;
  switch (stage) {
    case Stage::TrainPolicy:
    case Stage::GenData:
      return {};
    case Stage::Harvest:
      return {kPolicy, kTrainDataset};
    case Stage::TrainSae:
      return {kActivations};
    case Stage::Attribute: {
      std::vector<std::string> in = {kPolicy, kEvalDataset};
      if (uses_sae(cfg)) in.push_back(kSae);
      return in;
    }
    case Stage::Select: {
      std::vector<std::string> in = {kScores, kPolicy};
      if (uses_sae(cfg)) in.push_back(kSae);
      return in;
    }
    case Stage::Steer: {
      std::vector<std::string> in = {kPolicy, kIntervention, kEvalDataset};
      if (uses_sae(cfg)) in.push_back(kSae);
      return in;
    }
    case Stage::Eval:
      return {kPolicy, kEvalDataset};
    case Stage::Analyze: {
      std::vector<std::string> in = {kPolicy, kIntervention, kEvalDataset};
      if (uses_sae(cfg)) {
        in.push_back(kSae);
        in.push_back(kHarvestTrajectories);
      }
      return in;
    }
    case Stage::Report:
      return {kPolicyTrainStats, kEvalReportJson, kGammaSweepCsv, kScores};
  }
  throw std::invalid_argument("unknown stage");
}

std::vector<std::string> stage_outputs(const RunConfig& cfg, Stage stage) {
  using namespace artifact;
  switch (stage) {
    case Stage::TrainPolicy:
      return {kPolicy, kPolicyTrainStats};
    case Stage::GenData:
      return {kTrainDataset, kEvalDataset};
    case Stage::Harvest:
      return {kActivations, kHarvestTrajectories};
    case Stage::TrainSae:
      return {kSae, kSaeTrainStats};
    case Stage::Attribute:
      return {kScores};
    case Stage::Select:
      return {kIntervention};
    case Stage::Steer:
      return {steer_report_csv(cfg.steer_gamma), steer_report_json(cfg.steer_gamma),
              steer_trajectories(cfg.steer_gamma)};
    case Stage::Eval:
      return {kEvalReportCsv, kEvalReportJson, kEvalTrajectories};
    case Stage::Analyze: {
      std::vector<std::string> out = {kGammaSweepCsv, kGammaSweepSvg};
      if (uses_sae(cfg)) {
        out.push_back(kProfilesCsv);
        out.push_back(kProfilesSvg);
      }
      return out;
    }
    case Stage::Report:
      return {kReportCsv, kReportJson};
  }
  throw std::invalid_argument("unknown stage");
}

namespace {

std::vector<int64_t> random_component_set(uint64_t seed, int64_t width, int64_t count) {
  std::mt19937_64 rng(seed);
  std::vector<int64_t> pool(static_cast<size_t>(width));
  std::iota(pool.begin(), pool.end(), 0);
  for (int64_t i = 0; i < count; ++i) {
    const int64_t j = uniform_int(rng, i, width - 1);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(count));
  std::sort(pool.begin(), pool.end());
  return pool;
}

double mean_reward_of(const BehaviorReport& rep) {
  double total = 0.0;
  for (const BehaviorOutcome& o : rep.outcomes) total += o.reward;
  return total / static_cast<double>(rep.outcomes.size());
}

void stage_train_policy(const RunConfig& cfg) {
  Policy policy(cfg.policy_config());
  TrainOptions opt = cfg.train;
  opt.seed = derive_seed(cfg.seed, "train-policy");
  opt.max_new_tokens = cfg.gen_max_new;
  const TrainStats stats = train_policy(policy, {cfg.task}, opt);
  policy.save(join(cfg, artifact::kPolicy));
  nlohmann::json j;
  j["final_loss"] = stats.final_loss;
  j["heldout_accuracy"] = stats.heldout_accuracy;
  j["steps"] = cfg.train.steps;
  write_text_file(join(cfg, artifact::kPolicyTrainStats), j.dump(2) + "\n");
}

void stage_gen_data(const RunConfig& cfg) {
  const std::vector<Instance> train =
      gen_instances(cfg.task, cfg.data_train_count, derive_seed(cfg.seed, "data-train"));
  const std::vector<Instance> eval =
      gen_instances(cfg.task, cfg.data_eval_count, derive_seed(cfg.seed, "data-eval"));
  save_dataset(join(cfg, artifact::kTrainDataset), cfg.task, train);
  save_dataset(join(cfg, artifact::kEvalDataset), cfg.task, eval);
}

void stage_harvest(const RunConfig& cfg) {
  const Policy policy = Policy::load(join(cfg, artifact::kPolicy));
  const std::vector<Instance> dataset = load_dataset(join(cfg, artifact::kTrainDataset));
  const int count = std::min<int>(cfg.harvest_count, static_cast<int>(dataset.size()));

  ActivationDump dump;
  dump.layer = cfg.attr_layer;
  dump.width = policy.config().dim;
  dump.policy_hash = policy.param_hash();
  std::vector<Trajectory> trajectories;
  for (int i = 0; i < count; ++i) {
    const GenMode mode = GenMode::sample(cfg.sample_top_p, cfg.sample_temperature,
                                         derive_seed(cfg.seed, "harvest", i));
    Trajectory traj =
        generate(policy, dataset[static_cast<size_t>(i)].prompt, mode, cfg.gen_max_new, tok::kEos);
    const Tensor h = record_hidden_states(policy, traj, cfg.attr_layer);
    for (int64_t r = 0; r < h.rows(); ++r)
      for (int64_t c = 0; c < h.cols(); ++c)
        dump.rows.push_back(static_cast<float>(h.at(r, c)));
    trajectories.push_back(std::move(traj));
  }
  save_activations(join(cfg, artifact::kActivations), dump);
  save_trajectories(join(cfg, artifact::kHarvestTrajectories), trajectories);
}

void stage_train_sae(const RunConfig& cfg) {
  const ActivationDump dump = load_activations(join(cfg, artifact::kActivations));
  Tensor data = Tensor::zeros({dump.count(), dump.width});
  for (size_t i = 0; i < dump.rows.size(); ++i)
    data.data()[i] = static_cast<double>(dump.rows[i]);

  SaeConfig sc;
  sc.input_dim = dump.width;
  sc.expansion = cfg.sae_expansion;
  sc.topk = cfg.sae_topk;
  sc.init_seed = derive_seed(cfg.seed, "sae-init");
  Sae sae(sc);
  SaeTrainOptions opt = cfg.sae_train;
  opt.seed = derive_seed(cfg.seed, "train-sae");
  const SaeTrainStats stats = train_sae(sae, data, opt);
  sae.save(join(cfg, artifact::kSae));
  nlohmann::json j;
  j["final_loss"] = stats.final_loss;
  j["initial_fvu"] = stats.initial_fvu;
  j["final_fvu"] = stats.final_fvu;
  j["rows"] = dump.count();
  write_text_file(join(cfg, artifact::kSaeTrainStats), j.dump(2) + "\n");
}

void stage_attribute(const RunConfig& cfg) {
  const Policy policy = Policy::load(join(cfg, artifact::kPolicy));
  const std::vector<Instance> dataset = load_dataset(join(cfg, artifact::kEvalDataset));
  std::optional<Sae> sae;
  ComponentSpace space = ComponentSpace::neuron();
  if (uses_sae(cfg)) {
    sae.emplace(Sae::load(join(cfg, artifact::kSae)));
    space = ComponentSpace::features(*sae);
  }
  const SignalFn signal = cfg.signal();

  std::vector<AttributionScoreTable> per_sample;
  for (int i = 0; i < cfg.attr_samples; ++i) {
    IpgOptions opt;
    opt.group_size = cfg.attr_group_size;
    opt.q = cfg.attr_q;
    opt.top_p = cfg.sample_top_p;
    opt.temperature = cfg.sample_temperature;
    opt.seed = derive_seed(cfg.seed, "attribute", i);
    opt.max_new_tokens = cfg.gen_max_new;
    opt.baseline = cfg.baseline();
    const GroupAttribution ga =
        ipg_sample(policy, cfg.attr_layer, space, dataset[static_cast<size_t>(i)], signal, opt);
    AttributionScoreTable t;
    t.layer = cfg.attr_layer;
    t.space = space.tag();
    t.signal = signal_kind_name(signal.kind);
    t.baseline = opt.baseline.tag();
    t.samples = 1;
    t.group_size = cfg.attr_group_size;
    t.q = cfg.attr_q;
    t.scores = ga.scores;
    t.selected = top_p_indices(ga.scores, cfg.select_count);
    per_sample.push_back(std::move(t));
  }
  const AttributionScoreTable table = aggregate_and_select(per_sample, cfg.select_count);
  save_score_table(join(cfg, artifact::kScores), table);
}

void stage_select(const RunConfig& cfg) {
  const AttributionScoreTable table = load_score_table(join(cfg, artifact::kScores));
  const Policy policy = Policy::load(join(cfg, artifact::kPolicy));
  std::optional<Sae> sae;
  InterventionSpec spec;
  spec.layer = table.layer;
  spec.gamma = cfg.steer_gamma;
  spec.components = table.selected;
  if (uses_sae(cfg)) {
    sae.emplace(Sae::load(join(cfg, artifact::kSae)));
    spec.space = ComponentSpace::features(*sae);
  }
  spec.validate_for(policy.config());
  save_intervention(join(cfg, artifact::kIntervention), spec);
}

void write_behavior(const RunConfig& cfg, const BehaviorReport& rep,
                    const std::vector<Trajectory>& trajectories, const std::string& csv,
                    const std::string& json, const std::string& traj_file) {
  save_behavior_csv(join(cfg, csv), rep);
  save_behavior_json(join(cfg, json), rep);
  save_trajectories(join(cfg, traj_file), trajectories);
}

void stage_steer(const RunConfig& cfg) {
  const Policy policy = Policy::load(join(cfg, artifact::kPolicy));
  std::optional<Sae> sae;
  const Sae* handle = nullptr;
  if (uses_sae(cfg)) {
    sae.emplace(Sae::load(join(cfg, artifact::kSae)));
    handle = &*sae;
  }
  InterventionSpec spec = load_intervention(join(cfg, artifact::kIntervention), handle);
  spec.gamma = cfg.steer_gamma;
  const std::vector<Instance> dataset = load_dataset(join(cfg, artifact::kEvalDataset));
  std::vector<Trajectory> trajectories;
  const BehaviorReport rep = eval_behavior(policy, &spec, dataset, cfg.signal(),
                                           GenMode::greedy(), cfg.gen_max_new, &trajectories);
  write_behavior(cfg, rep, trajectories, artifact::steer_report_csv(cfg.steer_gamma),
                 artifact::steer_report_json(cfg.steer_gamma),
                 artifact::steer_trajectories(cfg.steer_gamma));
}

void stage_eval(const RunConfig& cfg) {
  const Policy policy = Policy::load(join(cfg, artifact::kPolicy));
  const std::vector<Instance> dataset = load_dataset(join(cfg, artifact::kEvalDataset));
  std::vector<Trajectory> trajectories;
  const BehaviorReport rep = eval_behavior(policy, nullptr, dataset, cfg.signal(),
                                           GenMode::greedy(), cfg.gen_max_new, &trajectories);
  write_behavior(cfg, rep, trajectories, artifact::kEvalReportCsv, artifact::kEvalReportJson,
                 artifact::kEvalTrajectories);
}

void stage_analyze(const RunConfig& cfg) {
  const Policy policy = Policy::load(join(cfg, artifact::kPolicy));
  std::optional<Sae> sae;
  const Sae* handle = nullptr;
  if (uses_sae(cfg)) {
    sae.emplace(Sae::load(join(cfg, artifact::kSae)));
    handle = &*sae;
  }
  InterventionSpec spec = load_intervention(join(cfg, artifact::kIntervention), handle);
  const std::vector<Instance> dataset = load_dataset(join(cfg, artifact::kEvalDataset));
  const SignalFn signal = cfg.signal();

  InterventionSpec random_spec = spec;
  random_spec.components = random_component_set(
      derive_seed(cfg.seed, "analyze-random"), spec.space.dim(policy.config().dim),
      static_cast<int64_t>(spec.components.size()));

  std::string csv = "gamma,accuracy,mean_length,mean_reward,random_accuracy,random_mean_length\n";
  std::vector<double> selected_acc, random_acc;
  for (double gamma : cfg.gamma_grid) {
    spec.gamma = gamma;
    random_spec.gamma = gamma;
    const BehaviorReport sel =
        eval_behavior(policy, &spec, dataset, signal, GenMode::greedy(), cfg.gen_max_new);
    const BehaviorReport rnd =
        eval_behavior(policy, &random_spec, dataset, signal, GenMode::greedy(), cfg.gen_max_new);
    const auto fd = [](double v) { return detail::format_double(v); };
    csv += fd(gamma) + ',' + fd(sel.accuracy) + ',' + fd(sel.mean_length) + ',' +
           fd(mean_reward_of(sel)) + ',' + fd(rnd.accuracy) + ',' + fd(rnd.mean_length) + '\n';
    selected_acc.push_back(sel.accuracy);
    random_acc.push_back(rnd.accuracy);
  }
  write_text_file(join(cfg, artifact::kGammaSweepCsv), csv);

  // Accuracy-vs-gamma plot: selected components in blue, the size-matched
  // random set in red.
  const int left = 56, top = 16, plot_w = 420, plot_h = 220;
  char buf[256];
  std::string svg;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
                "font-family=\"monospace\" font-size=\"11\">",
                left + plot_w + 150, top + plot_h + 44);
  svg = std::string(buf) + "\n";
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>", left,
                top + plot_h, left + plot_w, top + plot_h);
  svg += std::string(buf) + "\n";
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>", left, top,
                left, top + plot_h);
  svg += std::string(buf) + "\n";
  const int points = static_cast<int>(cfg.gamma_grid.size());
  const auto x_at = [&](int i) {
    return points == 1 ? left + plot_w / 2 : left + (plot_w * i) / (points - 1);
  };
  for (int i = 0; i < points; ++i) {
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%s</text>",
                  x_at(i), top + plot_h + 16,
                  short_double(cfg.gamma_grid[static_cast<size_t>(i)]).c_str());
    svg += std::string(buf) + "\n";
  }
  const auto polyline = [&](const std::vector<double>& ys, const char* color) {
    std::string pts;
    for (int i = 0; i < points; ++i) {
      std::snprintf(buf, sizeof buf, "%s%d,%s", i == 0 ? "" : " ", x_at(i),
                    detail::format_double(top + plot_h * (1.0 - ys[static_cast<size_t>(i)]))
                        .c_str());
      pts += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<polyline points=\"%s\" fill=\"none\" stroke=\"%s\" stroke-width=\"2\"/>",
                  pts.c_str(), color);
    svg += std::string(buf) + "\n";
  };
  polyline(selected_acc, "#1f77b4");
  polyline(random_acc, "#d62728");
  std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" fill=\"#1f77b4\">selected</text>",
                left + plot_w + 10, top + 14);
  svg += std::string(buf) + "\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" fill=\"#d62728\">random</text>",
                left + plot_w + 10, top + 30);
  svg += std::string(buf) + "\n";
  svg += "</svg>\n";
  write_text_file(join(cfg, artifact::kGammaSweepSvg), svg);

  if (uses_sae(cfg)) {
    const std::vector<Trajectory> trajectories =
        load_trajectories(join(cfg, artifact::kHarvestTrajectories));
    const std::vector<TemporalProfile> profiles =
        temporal_profile(policy, spec.layer, *sae, trajectories, spec.components);
    save_profiles_csv(join(cfg, artifact::kProfilesCsv), profiles);
    save_profiles_svg(join(cfg, artifact::kProfilesSvg), profiles);
  }
}

struct SweepRow {
  double gamma = 0.0;
  double accuracy = 0.0;
  double mean_length = 0.0;
  double mean_reward = 0.0;
  double random_accuracy = 0.0;
  double random_mean_length = 0.0;
};

std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) ||
      line != "gamma,accuracy,mean_length,mean_reward,random_accuracy,random_mean_length")
    throw std::runtime_error("report: unexpected gamma sweep header");
  std::vector<SweepRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ','))
      vals.push_back(detail::parse_double(cell, "report", "gamma sweep cell"));
    if (vals.size() != 6) throw std::runtime_error("report: short gamma sweep row");
    rows.push_back({vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]});
  }
  if (rows.empty()) throw std::runtime_error("report: empty gamma sweep");
  return rows;
}

void stage_report(const RunConfig& cfg) {
  const std::vector<SweepRow> sweep =
      parse_sweep_csv(read_text_file(join(cfg, artifact::kGammaSweepCsv)));
  const auto row_at = [&](double gamma, const char* what) -> const SweepRow& {
    for (const SweepRow& r : sweep)
      if (r.gamma == gamma) return r;
    throw std::runtime_error(std::string("report: gamma sweep has no row for ") + what);
  };
  const SweepRow& enhance = row_at(cfg.enhance_gamma, "steer.enhance_gamma");
  const SweepRow& suppress = row_at(cfg.suppress_gamma, "steer.suppress_gamma");

  nlohmann::json eval_json, train_json;
  try {
    eval_json = nlohmann::json::parse(read_text_file(join(cfg, artifact::kEvalReportJson)));
    train_json = nlohmann::json::parse(read_text_file(join(cfg, artifact::kPolicyTrainStats)));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("report: " + std::string(e.what()));
  }
  const AttributionScoreTable table = load_score_table(join(cfg, artifact::kScores));

  const auto fd = [](double v) { return detail::format_double(v); };
  const double base_acc = eval_json.at("accuracy").get<double>();
  const double base_len = eval_json.at("mean_length").get<double>();
  std::string csv = "condition,gamma,accuracy,mean_length\n";
  csv += "baseline,1," + fd(base_acc) + ',' + fd(base_len) + '\n';
  csv += "enhance," + fd(enhance.gamma) + ',' + fd(enhance.accuracy) + ',' +
         fd(enhance.mean_length) + '\n';
  csv += "suppress," + fd(suppress.gamma) + ',' + fd(suppress.accuracy) + ',' +
         fd(suppress.mean_length) + '\n';
  csv += "random-suppress," + fd(suppress.gamma) + ',' + fd(suppress.random_accuracy) + ',' +
         fd(suppress.random_mean_length) + '\n';
  write_text_file(join(cfg, artifact::kReportCsv), csv);

  nlohmann::json j;
  j["task"] = cfg.task.to_string();
  j["space"] = table.space;
  j["layer"] = table.layer;
  j["selected_components"] = table.selected;
  j["train"] = {{"final_loss", train_json.at("final_loss").get<double>()},
                {"heldout_accuracy", train_json.at("heldout_accuracy").get<double>()}};
  j["baseline"] = {{"accuracy", base_acc}, {"mean_length", base_len}};
  j["enhance"] = {{"gamma", enhance.gamma},
                  {"accuracy", enhance.accuracy},
                  {"mean_length", enhance.mean_length}};
  j["suppress"] = {{"gamma", suppress.gamma},
                   {"accuracy", suppress.accuracy},
                   {"mean_length", suppress.mean_length}};
  j["random_suppress"] = {{"gamma", suppress.gamma},
                          {"accuracy", suppress.random_accuracy},
                          {"mean_length", suppress.random_mean_length}};
  nlohmann::json sweep_json;
  for (const SweepRow& r : sweep) {
    sweep_json["gamma"].push_back(r.gamma);
    sweep_json["accuracy"].push_back(r.accuracy);
    sweep_json["mean_length"].push_back(r.mean_length);
    sweep_json["random_accuracy"].push_back(r.random_accuracy);
  }
  j["sweep"] = std::move(sweep_json);
  j["artifacts"] = {{"gamma_sweep_csv", artifact::kGammaSweepCsv},
                    {"gamma_sweep_svg", artifact::kGammaSweepSvg},
                    {"scores", artifact::kScores},
                    {"intervention", artifact::kIntervention}};
  write_text_file(join(cfg, artifact::kReportJson), j.dump(2) + "\n");
}

void execute_stage(const RunConfig& cfg, Stage stage) {
  switch (stage) {
    case Stage::TrainPolicy: stage_train_policy(cfg); return;
    case Stage::GenData: stage_gen_data(cfg); return;
    case Stage::Harvest: stage_harvest(cfg); return;
    case Stage::TrainSae: stage_train_sae(cfg); return;
    case Stage::Attribute: stage_attribute(cfg); return;
    case Stage::Select: stage_select(cfg); return;
    case Stage::Steer: stage_steer(cfg); return;
    case Stage::Eval: stage_eval(cfg); return;
    case Stage::Analyze: stage_analyze(cfg); return;
    case Stage::Report: stage_report(cfg); return;
  }
  throw std::invalid_argument("unknown stage");
}

bool artifacts_match(const RunConfig& cfg, const std::vector<ArtifactHash>& items) {
  for (const ArtifactHash& a : items) {
    const std::string path = join(cfg, a.path);
    if (!fs::exists(path) || hash_file(path) != a.hash) return false;
  }
  return true;
}

}  // namespace

bool stage_up_to_date(const RunConfig& cfg, Stage stage) {
  const std::string manifest_path = join(cfg, artifact::kManifest);
  if (!fs::exists(manifest_path)) return false;
  const Manifest manifest = load_manifest(manifest_path);
  const StageRecord* record = manifest.find(stage_name(stage));
  if (record == nullptr || record->config_hash != run_config_hash(cfg)) return false;
  return artifacts_match(cfg, record->inputs) && artifacts_match(cfg, record->outputs);
}

bool run_stage(const RunConfig& cfg, Stage stage, bool force) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  if (!force && stage_up_to_date(cfg, stage)) return false;

  std::vector<ArtifactHash> inputs;
  for (const std::string& rel : stage_inputs(cfg, stage)) {
    const std::string path = join(cfg, rel);
    if (!fs::exists(path))
      throw std::runtime_error(std::string("stage ") + stage_name(stage) +
                               ": missing input artifact '" + rel + "'");
    inputs.push_back({rel, hash_file(path)});
  }

  const auto t0 = std::chrono::steady_clock::now();
  execute_stage(cfg, stage);
  const auto t1 = std::chrono::steady_clock::now();

  std::vector<ArtifactHash> outputs;
  for (const std::string& rel : stage_outputs(cfg, stage)) {
    const std::string path = join(cfg, rel);
    if (!fs::exists(path))
      throw std::runtime_error(std::string("stage ") + stage_name(stage) +
                               ": did not produce '" + rel + "'");
    outputs.push_back({rel, hash_file(path)});
  }

  const std::string manifest_path = join(cfg, artifact::kManifest);
  Manifest manifest;
  if (fs::exists(manifest_path)) manifest = load_manifest(manifest_path);
  StageRecord& record = manifest.upsert(stage_name(stage));
  record.config_hash = run_config_hash(cfg);
  record.wall_ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
  record.inputs = std::move(inputs);
  record.outputs = std::move(outputs);
  save_manifest(manifest_path, manifest);
  save_run_config(join(cfg, artifact::kConfigSnapshot), cfg);
  return true;
}

int run_pipeline(const RunConfig& cfg, bool force) {
  int executed = 0;
  for (Stage stage : kStageOrder)
    if (run_stage(cfg, stage, force)) ++executed;
  return executed;
}

}  // namespace ipg
