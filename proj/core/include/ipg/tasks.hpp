#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace ipg {

// Fixed token ids shared by all task kinds. Digit tokens occupy 0..9 so a
// residue or symbol value is its own token id.
namespace tok {
constexpr int kPlus = 10;
constexpr int kTimes = 11;
constexpr int kBos = 12;
constexpr int kGo = 13;   // end of prompt, start of reasoning
constexpr int kStep = 14; // step delimiter, one per reasoning step
constexpr int kAns = 15;  // answer delimiter
constexpr int kEos = 16;
constexpr int kVocab = 17;
}  // namespace tok

enum class TaskKind { ModArithChain, ParityChain, CopyTransform };

const char* task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(const std::string& name);

// Parameters of a synthetic chain task. `verify_prob` is the probability that
// an instance's target repeats the step block once before the answer, which is
// the only source of length variation among correct trajectories.
struct TaskSpec {
  TaskKind kind = TaskKind::ModArithChain;
  int modulus = 7;   // mod-arith
  int alphabet = 4;  // copy-transform symbol count; parity is fixed to {0,1}
  int shift = 1;     // copy-transform symbol shift
  int len_min = 2;
  int len_max = 4;
  double verify_prob = 0.0;

  void validate() const;
  std::string to_string() const;
  static TaskSpec parse(const std::string& text);
  // Number of distinct prompts this spec can produce.
  double prompt_space() const;
};

struct Instance {
  std::vector<int> prompt;
  std::vector<int> target;  // reasoning steps + answer span, ends with EOS
  std::vector<int> gold;    // expected answer token sequence
  uint64_t seed = 0;
};

// Pure function of (spec, seed).
Instance make_instance(const TaskSpec& spec, uint64_t seed);

// Deterministic batch with distinct prompts; duplicates only appear once the
// prompt space is exhausted.
std::vector<Instance> gen_instances(const TaskSpec& spec, int count, uint64_t seed);

// Tokens after the last answer delimiter, excluding a trailing EOS. Empty if
// no delimiter is present.
std::vector<int> extract_answer(const std::vector<int>& generated);

enum class SignalKind { Binary, Length, Pluggable };

// Scalar reward over a generated token sequence. Length uses
// f(L) = quad_a*L^2 + quad_b*L + quad_c, constrained monotone on L >= 0.
struct SignalFn {
  SignalKind kind = SignalKind::Binary;
  double quad_a = 0.0;
  double quad_b = 1.0;
  double quad_c = 0.0;
  std::function<double(const std::vector<int>&, const std::vector<int>&)> pluggable;

  static SignalFn binary();
  static SignalFn length(double quad_a = 0.0, double quad_b = 1.0, double quad_c = 0.0);
  static SignalFn custom(std::function<double(const std::vector<int>&, const std::vector<int>&)> fn);
};

double eval_signal(const SignalFn& signal, const std::vector<int>& generated,
                   const std::vector<int>& gold);

// Stable name for reports and score tables: "binary" | "length" | "custom".
const char* signal_kind_name(SignalKind kind);

// Line-delimited dataset records {prompt, gold, seed, spec}. Instances are
// reconstructed from (spec, seed) on load and cross-checked against the stored
// prompt.
void save_dataset(const std::string& path, const TaskSpec& spec,
                  const std::vector<Instance>& instances);
std::vector<Instance> load_dataset(const std::string& path, TaskSpec* spec_out = nullptr);

}  // namespace ipg
