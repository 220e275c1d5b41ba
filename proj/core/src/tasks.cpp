#include "ipg/tasks.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ipg/common.hpp"

namespace ipg {

const char* task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::ModArithChain: return "mod-arith-chain";
    case TaskKind::ParityChain: return "parity-chain";
    case TaskKind::CopyTransform: return "copy-transform";
  }
  throw std::invalid_argument("task: unknown kind");
}

TaskKind task_kind_from_name(const std::string& name) {
  if (name == "mod-arith-chain") return TaskKind::ModArithChain;
  if (name == "parity-chain") return TaskKind::ParityChain;
  if (name == "copy-transform") return TaskKind::CopyTransform;
  throw std::invalid_argument("task: unknown kind '" + name + "'");
}

void TaskSpec::validate() const {
  if (len_min < 1 || len_max < len_min) throw std::invalid_argument("task: bad length range");
  if (verify_prob < 0.0 || verify_prob > 1.0)
    throw std::invalid_argument("task: verify_prob outside [0,1]");
  switch (kind) {
    case TaskKind::ModArithChain:
      if (modulus < 2 || modulus > 10) throw std::invalid_argument("task: modulus outside [2,10]");
      break;
    case TaskKind::ParityChain:
      break;
    case TaskKind::CopyTransform:
      if (alphabet < 2 || alphabet > 10)
        throw std::invalid_argument("task: alphabet outside [2,10]");
      if (shift < 1 || shift >= alphabet) throw std::invalid_argument("task: bad shift");
      break;
  }
}

std::string TaskSpec::to_string() const {
  char buf[160];
  switch (kind) {
    case TaskKind::ModArithChain:
      std::snprintf(buf, sizeof(buf), "mod-arith-chain(mod=%d,len=%d..%d,verify=%g)", modulus,
                    len_min, len_max, verify_prob);
      break;
    case TaskKind::ParityChain:
      std::snprintf(buf, sizeof(buf), "parity-chain(len=%d..%d,verify=%g)", len_min, len_max,
                    verify_prob);
      break;
    case TaskKind::CopyTransform:
      std::snprintf(buf, sizeof(buf), "copy-transform(alphabet=%d,shift=%d,len=%d..%d,verify=%g)",
                    alphabet, shift, len_min, len_max, verify_prob);
      break;
  }
  return buf;
}

TaskSpec TaskSpec::parse(const std::string& text) {
  const auto open = text.find('(');
  if (open == std::string::npos || text.back() != ')')
    throw std::invalid_argument("task: malformed spec '" + text + "'");
  TaskSpec spec;
  spec.kind = task_kind_from_name(text.substr(0, open));
  std::stringstream body(text.substr(open + 1, text.size() - open - 2));
  std::string item;
  while (std::getline(body, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("task: malformed field '" + item + "'");
    const std::string key = item.substr(0, eq);
    const std::string val = item.substr(eq + 1);
    if (key == "mod") spec.modulus = std::stoi(val);
    else if (key == "alphabet") spec.alphabet = std::stoi(val);
    else if (key == "shift") spec.shift = std::stoi(val);
    else if (key == "verify") spec.verify_prob = std::stod(val);
    else if (key == "len") {
      const auto dots = val.find("..");
      if (dots == std::string::npos) throw std::invalid_argument("task: malformed len range");
      spec.len_min = std::stoi(val.substr(0, dots));
      spec.len_max = std::stoi(val.substr(dots + 2));
    } else {
      throw std::invalid_argument("task: unknown field '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

double TaskSpec::prompt_space() const {
  double total = 0;
  for (int r = len_min; r <= len_max; ++r) {
    switch (kind) {
      case TaskKind::ModArithChain:
        total += modulus * std::pow(2.0 * modulus, r);
        break;
      case TaskKind::ParityChain:
        total += std::pow(2.0, r);
        break;
      case TaskKind::CopyTransform:
        total += std::pow(static_cast<double>(alphabet), r);
        break;
    }
  }
  return total;
}

Instance make_instance(const TaskSpec& spec, uint64_t seed) {
  spec.validate();
  // The problem key excludes verify_prob, so the same seed names the same
  // problem across verbosity settings; verify only alters the target.
  TaskSpec problem_key = spec;
  problem_key.verify_prob = 0.0;
  std::mt19937_64 rng(splitmix64(seed ^ fnv1a64(problem_key.to_string())));
  Instance inst;
  inst.seed = seed;
  const int len = static_cast<int>(uniform_int(rng, spec.len_min, spec.len_max));

  inst.prompt.push_back(tok::kBos);
  std::vector<int> running;
  switch (spec.kind) {
    case TaskKind::ModArithChain: {
      int acc = static_cast<int>(uniform_int(rng, 0, spec.modulus - 1));
      inst.prompt.push_back(acc);
      for (int i = 0; i < len; ++i) {
        const bool plus = uniform_int(rng, 0, 1) == 0;
        const int arg = static_cast<int>(uniform_int(rng, 0, spec.modulus - 1));
        inst.prompt.push_back(plus ? tok::kPlus : tok::kTimes);
        inst.prompt.push_back(arg);
        acc = plus ? (acc + arg) % spec.modulus : (acc * arg) % spec.modulus;
        running.push_back(acc);
      }
      break;
    }
    case TaskKind::ParityChain: {
      int acc = 0;
      for (int i = 0; i < len; ++i) {
        const int bit = static_cast<int>(uniform_int(rng, 0, 1));
        inst.prompt.push_back(bit);
        acc ^= bit;
        running.push_back(acc);
      }
      break;
    }
    case TaskKind::CopyTransform: {
      for (int i = 0; i < len; ++i) {
        const int sym = static_cast<int>(uniform_int(rng, 0, spec.alphabet - 1));
        inst.prompt.push_back(sym);
        running.push_back((sym + spec.shift) % spec.alphabet);
      }
      break;
    }
  }
  inst.prompt.push_back(tok::kGo);
  inst.gold = {running.back()};

  const bool verify = uniform_unit(rng) < spec.verify_prob;
  const int passes = verify ? 2 : 1;
  for (int p = 0; p < passes; ++p)
    for (int v : running) {
      inst.target.push_back(tok::kStep);
      inst.target.push_back(v);
    }
  inst.target.push_back(tok::kAns);
  inst.target.insert(inst.target.end(), inst.gold.begin(), inst.gold.end());
  inst.target.push_back(tok::kEos);
  return inst;
}

std::vector<Instance> gen_instances(const TaskSpec& spec, int count, uint64_t seed) {
  if (count < 1) throw std::invalid_argument("task: instance count must be positive");
  spec.validate();
  const double space = spec.prompt_space();
  std::vector<Instance> out;
  std::set<std::vector<int>> seen;
  uint64_t draw = 0;
  while (static_cast<int>(out.size()) < count) {
    Instance inst = make_instance(spec, derive_seed(seed, "instance", draw));
    ++draw;
    const bool exhausted = static_cast<double>(seen.size()) >= space;
    if (!exhausted && !seen.insert(inst.prompt).second) continue;
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<int> extract_answer(const std::vector<int>& generated) {
  auto it = std::find(generated.rbegin(), generated.rend(), tok::kAns);
  if (it == generated.rend()) return {};
  std::vector<int> ans(it.base(), generated.end());
  if (!ans.empty() && ans.back() == tok::kEos) ans.pop_back();
  return ans;
}

SignalFn SignalFn::binary() { return SignalFn{}; }

SignalFn SignalFn::length(double quad_a, double quad_b, double quad_c) {
  if (quad_a < 0 || quad_b < 0 || quad_a + quad_b <= 0)
    throw std::invalid_argument("signal: length quadratic must be monotone increasing");
  SignalFn s;
  s.kind = SignalKind::Length;
  s.quad_a = quad_a;
  s.quad_b = quad_b;
  s.quad_c = quad_c;
  return s;
}

SignalFn SignalFn::custom(
    std::function<double(const std::vector<int>&, const std::vector<int>&)> fn) {
  if (!fn) throw std::invalid_argument("signal: null pluggable function");
  SignalFn s;
  s.kind = SignalKind::Pluggable;
  s.pluggable = std::move(fn);
  return s;
}

double eval_signal(const SignalFn& signal, const std::vector<int>& generated,
                   const std::vector<int>& gold) {
  switch (signal.kind) {
    case SignalKind::Binary: {
      const std::vector<int> ans = extract_answer(generated);
      return !ans.empty() && ans == gold ? 1.0 : 0.0;
    }
    case SignalKind::Length: {
      const double len = static_cast<double>(generated.size());
      return signal.quad_a * len * len + signal.quad_b * len + signal.quad_c;
    }
    case SignalKind::Pluggable:
      if (!signal.pluggable) throw std::invalid_argument("signal: null pluggable function");
      return signal.pluggable(generated, gold);
  }
  throw std::invalid_argument("signal: unknown kind");
}

const char* signal_kind_name(SignalKind kind) {
  switch (kind) {
    case SignalKind::Binary: return "binary";
    case SignalKind::Length: return "length";
    case SignalKind::Pluggable: return "custom";
  }
  throw std::invalid_argument("signal: unknown kind");
}

void save_dataset(const std::string& path, const TaskSpec& spec,
                  const std::vector<Instance>& instances) {
  std::ostringstream out;
  const std::string spec_str = spec.to_string();
  for (const Instance& inst : instances) {
    nlohmann::json rec;
    rec["prompt"] = inst.prompt;
    rec["gold"] = inst.gold;
    rec["seed"] = inst.seed;
    rec["spec"] = spec_str;
    out << rec.dump() << "\n";
  }
  write_text_file(path, out.str());
}

std::vector<Instance> load_dataset(const std::string& path, TaskSpec* spec_out) {
  std::istringstream in(read_text_file(path));
  std::vector<Instance> out;
  std::string line;
  TaskSpec spec;
  bool have_spec = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json rec = nlohmann::json::parse(line);
    const std::string spec_str = rec.at("spec").get<std::string>();
    if (!have_spec) {
      spec = TaskSpec::parse(spec_str);
      have_spec = true;
    } else if (spec_str != spec.to_string()) {
      throw std::runtime_error("dataset: mixed task specs in " + path);
    }
    Instance inst = make_instance(spec, rec.at("seed").get<uint64_t>());
    if (inst.prompt != rec.at("prompt").get<std::vector<int>>() ||
        inst.gold != rec.at("gold").get<std::vector<int>>())
      throw std::runtime_error("dataset: record does not match its seed in " + path);
    out.push_back(std::move(inst));
  }
  if (!have_spec) throw std::runtime_error("dataset: empty file " + path);
  if (spec_out) *spec_out = spec;
  return out;
}

}  // namespace ipg
