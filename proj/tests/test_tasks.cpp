#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <set>

#include "ipg/tasks.hpp"

using namespace ipg;

namespace {

// Independent reimplementation of the chain semantics, reading only the prompt
// tokens. Used as the oracle for the generator and verifier.
std::vector<int> brute_force_answer(const TaskSpec& spec, const std::vector<int>& prompt) {
  REQUIRE(prompt.front() == tok::kBos);
  REQUIRE(prompt.back() == tok::kGo);
  std::vector<int> body(prompt.begin() + 1, prompt.end() - 1);
  switch (spec.kind) {
    case TaskKind::ModArithChain: {
      long long acc = body.at(0);
      size_t i = 1;
      while (i + 1 < body.size() + 1 && i < body.size()) {
        const int op = body[i];
        const int arg = body[i + 1];
        if (op == tok::kPlus) acc = (acc + arg) % spec.modulus;
        else if (op == tok::kTimes) acc = (acc * arg) % spec.modulus;
        else FAIL("unexpected op token");
        i += 2;
      }
      return {static_cast<int>(acc)};
    }
    case TaskKind::ParityChain: {
      int acc = 0;
      for (int b : body) acc ^= b;
      return {acc};
    }
    case TaskKind::CopyTransform: {
      const int last = body.back();
      return {(last + spec.shift) % spec.alphabet};
    }
  }
  FAIL("unreachable");
  return {};
}

}  // namespace

TEST_CASE("generated instances agree with the brute-force oracle over 10k draws") {
  std::vector<TaskSpec> specs;
  {
    TaskSpec s;
    s.kind = TaskKind::ModArithChain;
    s.modulus = 7;
    s.len_min = 1;
    s.len_max = 5;
    s.verify_prob = 0.5;
    specs.push_back(s);
  }
  {
    TaskSpec s;
    s.kind = TaskKind::ParityChain;
    s.len_min = 1;
    s.len_max = 8;
    specs.push_back(s);
  }
  {
    TaskSpec s;
    s.kind = TaskKind::CopyTransform;
    s.alphabet = 5;
    s.shift = 2;
    s.len_min = 1;
    s.len_max = 6;
    specs.push_back(s);
  }

  int checked = 0;
  for (const TaskSpec& spec : specs) {
    for (uint64_t seed = 0; seed < 3400; ++seed) {
      Instance inst = make_instance(spec, seed);
      CHECK(inst.gold == brute_force_answer(spec, inst.prompt));
      // The target must be a well-formed reasoning trace ending in the answer.
      CHECK(extract_answer(inst.target) == inst.gold);
      CHECK(inst.target.back() == tok::kEos);
      CHECK(inst.target.front() == tok::kStep);
      CHECK(eval_signal(SignalFn::binary(), inst.target, inst.gold) == 1.0);
      ++checked;
    }
  }
  CHECK(checked == 10200);
}

TEST_CASE("mod-7 chain hand example") {
  // 3, +4, *2 mod 7: running values 0, 0.
  TaskSpec spec;
  spec.kind = TaskKind::ModArithChain;
  spec.modulus = 7;
  spec.len_min = 2;
  spec.len_max = 2;
  spec.verify_prob = 0.0;
  // Search the seed stream for the prompt [BOS 3 + 4 * 2 GO].
  const std::vector<int> want = {tok::kBos, 3, tok::kPlus, 4, tok::kTimes, 2, tok::kGo};
  bool found = false;
  for (uint64_t seed = 0; seed < 60000 && !found; ++seed) {
    Instance inst = make_instance(spec, seed);
    if (inst.prompt != want) continue;
    found = true;
    CHECK(inst.gold == std::vector<int>{0});
    CHECK(inst.target ==
          std::vector<int>{tok::kStep, 0, tok::kStep, 0, tok::kAns, 0, tok::kEos});
  }
  CHECK(found);
}

TEST_CASE("parity chain of length one answers the single bit") {
  TaskSpec spec;
  spec.kind = TaskKind::ParityChain;
  spec.len_min = 1;
  spec.len_max = 1;
  for (uint64_t seed = 0; seed < 16; ++seed) {
    Instance inst = make_instance(spec, seed);
    REQUIRE(inst.prompt.size() == 3);
    CHECK(inst.gold == std::vector<int>{inst.prompt[1]});
  }
}

TEST_CASE("verification pass duplicates the step block and keeps the answer") {
  TaskSpec spec;
  spec.kind = TaskKind::ModArithChain;
  spec.modulus = 5;
  spec.len_min = 3;
  spec.len_max = 3;
  spec.verify_prob = 1.0;
  TaskSpec plain = spec;
  plain.verify_prob = 0.0;
  for (uint64_t seed = 0; seed < 32; ++seed) {
    Instance v = make_instance(spec, seed);
    Instance p = make_instance(plain, seed);
    CHECK(v.prompt == p.prompt);
    CHECK(v.gold == p.gold);
    CHECK(v.target.size() == p.target.size() + 6);  // step block of 3 steps repeated
    CHECK(extract_answer(v.target) == v.gold);
  }
}

TEST_CASE("answer extraction uses the last delimiter") {
  const int A = tok::kAns, E = tok::kEos, S = tok::kStep;
  CHECK(extract_answer({S, 1, A, 2, S, 3, A, 4, E}) == std::vector<int>{4});
  CHECK(extract_answer({A, 2, 3}) == std::vector<int>{2, 3});  // no EOS: take the tail
  CHECK(extract_answer({S, 1, 2}) == std::vector<int>{});      // no delimiter
  CHECK(extract_answer({A, E}) == std::vector<int>{});         // empty span
}

TEST_CASE("binary signal is exact match of the extracted answer") {
  const int A = tok::kAns, E = tok::kEos;
  const std::vector<int> gold = {3};
  CHECK(eval_signal(SignalFn::binary(), {A, 3, E}, gold) == 1.0);
  CHECK(eval_signal(SignalFn::binary(), {A, 4, E}, gold) == 0.0);
  CHECK(eval_signal(SignalFn::binary(), {3, E}, gold) == 0.0);       // no delimiter
  CHECK(eval_signal(SignalFn::binary(), {A, 3, 3, E}, gold) == 0.0); // extra token
}

TEST_CASE("length signal applies the quadratic to the token count") {
  const std::vector<int> five = {1, 2, 3, 4, 5};
  CHECK(eval_signal(SignalFn::length(), five, {}) == 5.0);
  CHECK(eval_signal(SignalFn::length(1, 2, 3), five, {}) == 38.0);
  CHECK_THROWS_AS((void)SignalFn::length(-1, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)SignalFn::length(0, -2, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)SignalFn::length(0, 0, 1), std::invalid_argument);  // constant
}

TEST_CASE("pluggable signal is invoked with generated and gold") {
  SignalFn s = SignalFn::custom([](const std::vector<int>& g, const std::vector<int>& gold) {
    return static_cast<double>(g.size() + gold.size());
  });
  CHECK(eval_signal(s, {1, 2}, {3}) == 3.0);
}

TEST_CASE("instance batches are deterministic and prompt-unique") {
  TaskSpec spec;
  spec.kind = TaskKind::ModArithChain;
  spec.modulus = 7;
  spec.len_min = 2;
  spec.len_max = 3;
  auto a = gen_instances(spec, 64, 9);
  auto b = gen_instances(spec, 64, 9);
  REQUIRE(a.size() == 64);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].prompt == b[i].prompt);
    CHECK(a[i].target == b[i].target);
    CHECK(a[i].seed == b[i].seed);
  }
  std::set<std::vector<int>> prompts;
  for (const Instance& inst : a) prompts.insert(inst.prompt);
  CHECK(prompts.size() == 64);

  auto c = gen_instances(spec, 64, 10);
  bool any_diff = false;
  for (size_t i = 0; i < c.size(); ++i) any_diff = any_diff || c[i].prompt != a[i].prompt;
  CHECK(any_diff);
}

TEST_CASE("duplicates appear only after the prompt space is exhausted") {
  TaskSpec spec;
  spec.kind = TaskKind::ParityChain;
  spec.len_min = 1;
  spec.len_max = 1;
  CHECK(spec.prompt_space() == 2.0);
  auto two = gen_instances(spec, 2, 3);
  CHECK(two[0].prompt != two[1].prompt);
  auto three = gen_instances(spec, 3, 3);
  std::set<std::vector<int>> prompts;
  for (const Instance& inst : three) prompts.insert(inst.prompt);
  CHECK(prompts.size() == 2);
}

TEST_CASE("spec validation rejects bad parameters") {
  TaskSpec s;
  s.modulus = 1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = TaskSpec{};
  s.len_min = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = TaskSpec{};
  s.len_min = 5;
  s.len_max = 4;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = TaskSpec{};
  s.verify_prob = 1.5;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = TaskSpec{};
  s.kind = TaskKind::CopyTransform;
  s.alphabet = 11;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.alphabet = 4;
  s.shift = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("spec round trips through its string form") {
  TaskSpec s;
  s.kind = TaskKind::CopyTransform;
  s.alphabet = 6;
  s.shift = 3;
  s.len_min = 2;
  s.len_max = 5;
  s.verify_prob = 0.25;
  TaskSpec back = TaskSpec::parse(s.to_string());
  CHECK(back.to_string() == s.to_string());
  CHECK(back.kind == s.kind);
  CHECK(back.alphabet == 6);
  CHECK(back.verify_prob == 0.25);
  CHECK_THROWS_AS((void)TaskSpec::parse("no-such-task()"), std::invalid_argument);
}

TEST_CASE("dataset dump round trips and regenerates targets") {
  TaskSpec spec;
  spec.kind = TaskKind::ModArithChain;
  spec.modulus = 7;
  spec.len_min = 2;
  spec.len_max = 4;
  spec.verify_prob = 0.5;
  auto insts = gen_instances(spec, 24, 77);
  const std::string path = "tasks_roundtrip.jsonl";
  save_dataset(path, spec, insts);
  TaskSpec loaded_spec;
  auto loaded = load_dataset(path, &loaded_spec);
  CHECK(loaded_spec.to_string() == spec.to_string());
  REQUIRE(loaded.size() == insts.size());
  for (size_t i = 0; i < insts.size(); ++i) {
    CHECK(loaded[i].prompt == insts[i].prompt);
    CHECK(loaded[i].gold == insts[i].gold);
    CHECK(loaded[i].target == insts[i].target);
    CHECK(loaded[i].seed == insts[i].seed);
  }
  std::remove(path.c_str());
}
