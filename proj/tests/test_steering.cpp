#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "ipg/common.hpp"
#include "ipg/steering.hpp"

using namespace ipg;

namespace {

PolicyConfig tiny_config() {
  PolicyConfig cfg;
  cfg.vocab = tok::kVocab;
  cfg.context = 32;
  cfg.layers = 2;
  cfg.dim = 12;
  cfg.heads = 2;
  cfg.init_seed = 7;
  return cfg;
}

std::vector<int> tiny_prompt() { return {tok::kBos, 2, tok::kPlus, 5, tok::kGo}; }

SaeConfig sae_config() {
  SaeConfig sc;
  sc.input_dim = 12;
  sc.expansion = 2;
  sc.topk = 8;
  sc.init_seed = 3;
  return sc;
}

bool same_traj(const Trajectory& a, const Trajectory& b) {
  return a.prompt == b.prompt && a.generated == b.generated && a.logprobs == b.logprobs;
}

std::string scratch_path(const char* name) { return std::string("steering_scratch_") + name; }

}  // namespace

TEST_CASE("identity scaling reproduces plain generation bitwise") {
  Policy policy(tiny_config());

  InterventionSpec spec;
  spec.layer = 1;
  spec.gamma = 1.0;
  spec.components = {0, 5, 11};
  spec.space = ComponentSpace::neuron();

  Trajectory plain = generate(policy, tiny_prompt(), GenMode::greedy(), 8, tok::kEos);
  Trajectory steered = intervened_generate(policy, spec, tiny_prompt(), GenMode::greedy(), 8,
                                           tok::kEos);
  CHECK(same_traj(plain, steered));

  Sae sae(sae_config());
  spec.space = ComponentSpace::features(sae);
  spec.components = {0, 7, 23};
  Trajectory feature_steered = intervened_generate(policy, spec, tiny_prompt(), GenMode::greedy(),
                                                   8, tok::kEos);
  CHECK(same_traj(plain, feature_steered));

  // Sampled decode goes through the same path.
  GenMode mode = GenMode::sample(0.9, 0.8, 17);
  Trajectory plain_s = generate(policy, tiny_prompt(), mode, 8, tok::kEos);
  Trajectory steered_s = intervened_generate(policy, spec, tiny_prompt(), mode, 8, tok::kEos);
  CHECK(same_traj(plain_s, steered_s));
}

TEST_CASE("neuron intervention equals a hand-written residual hook") {
  Policy policy(tiny_config());

  InterventionSpec spec;
  spec.layer = 0;
  spec.gamma = 0.37;
  spec.components = {1, 3, 10};
  spec.space = ComponentSpace::neuron();

  ResidualHook hand;
  hand.layer = 0;
  hand.apply = [](std::span<double> row) {
    row[1] *= 0.37;
    row[3] *= 0.37;
    row[10] *= 0.37;
  };

  Trajectory want = generate(policy, tiny_prompt(), GenMode::greedy(), 8, tok::kEos, &hand);
  Trajectory got = intervened_generate(policy, spec, tiny_prompt(), GenMode::greedy(), 8,
                                       tok::kEos);
  CHECK(same_traj(want, got));
  // The intervention must actually change the rollout relative to baseline.
  Trajectory plain = generate(policy, tiny_prompt(), GenMode::greedy(), 8, tok::kEos);
  CHECK(plain.logprobs != got.logprobs);
}

TEST_CASE("feature intervention matches the literal decode-plus-error form") {
  Policy policy(tiny_config());
  Sae sae(sae_config());
  const std::vector<int64_t> sel = {2, 9, 17};
  const double gamma = 1.6;
  const int layer = 1;

  InterventionSpec spec;
  spec.layer = layer;
  spec.gamma = gamma;
  spec.components = sel;
  spec.space = ComponentSpace::features(sae);

  // Literal form: f = enc(z), eps = z - dec(f), scale selected features,
  // z' = dec(f') + eps.
  ResidualHook literal;
  literal.layer = layer;
  literal.apply = [&](std::span<double> row) {
    Tensor z = Tensor::from({1, static_cast<int64_t>(row.size())},
                            std::vector<double>(row.begin(), row.end()));
    Tensor f = sae.encode(z);
    Tensor zhat = sae.decode(f);
    Tensor f2 = f.clone();
    for (int64_t j : sel) f2.mut(0, j) *= gamma;
    Tensor z2 = sae.decode(f2);
    for (size_t i = 0; i < row.size(); ++i)
      row[i] = z2.at(0, static_cast<int64_t>(i)) +
               (z.at(0, static_cast<int64_t>(i)) - zhat.at(0, static_cast<int64_t>(i)));
  };

  Trajectory want = generate(policy, tiny_prompt(), GenMode::greedy(), 8, tok::kEos, &literal);
  Trajectory got = intervened_generate(policy, spec, tiny_prompt(), GenMode::greedy(), 8,
                                       tok::kEos);
  CHECK(want.generated == got.generated);
  REQUIRE(want.logprobs.size() == got.logprobs.size());
  for (size_t i = 0; i < want.logprobs.size(); ++i)
    CHECK(want.logprobs[i] == doctest::Approx(got.logprobs[i]).epsilon(1e-8));
}

TEST_CASE("disjoint component sets compose into their union") {
  Policy policy(tiny_config());

  InterventionSpec whole;
  whole.layer = 0;
  whole.gamma = 1.3;
  whole.components = {0, 2, 5};
  whole.space = ComponentSpace::neuron();

  ResidualHook sequential;
  sequential.layer = 0;
  sequential.apply = [](std::span<double> row) {
    for (int64_t i : {0, 2}) row[static_cast<size_t>(i)] *= 1.3;  // first set
    for (int64_t i : {5}) row[static_cast<size_t>(i)] *= 1.3;     // then the second
  };

  Trajectory want = generate(policy, tiny_prompt(), GenMode::greedy(), 8, tok::kEos, &sequential);
  Trajectory got = intervened_generate(policy, whole, tiny_prompt(), GenMode::greedy(), 8,
                                       tok::kEos);
  CHECK(same_traj(want, got));
}

TEST_CASE("full suppression still terminates with a well-formed trajectory") {
  Policy policy(tiny_config());

  InterventionSpec spec;
  spec.layer = 0;
  spec.gamma = 0.0;
  spec.components.resize(12);
  std::iota(spec.components.begin(), spec.components.end(), 0);
  spec.space = ComponentSpace::neuron();

  Trajectory traj = intervened_generate(policy, spec, tiny_prompt(), GenMode::greedy(), 8,
                                        tok::kEos);
  CHECK(traj.length() >= 1);
  CHECK(traj.length() <= 8);
  for (int t : traj.generated) {
    CHECK(t >= 0);
    CHECK(t < tok::kVocab);
  }
  for (double lp : traj.logprobs) CHECK(lp <= 0.0);

  ResidualHook zero;
  zero.layer = 0;
  zero.apply = [](std::span<double> row) {
    for (double& x : row) x *= 0.0;
  };
  Trajectory want = generate(policy, tiny_prompt(), GenMode::greedy(), 8, tok::kEos, &zero);
  CHECK(same_traj(want, traj));
}

TEST_CASE("intervention specs are validated against the policy") {
  PolicyConfig cfg = tiny_config();
  Policy policy(cfg);
  Sae sae(sae_config());

  InterventionSpec spec;
  spec.layer = 0;
  spec.gamma = 1.1;
  spec.components = {0};
  spec.space = ComponentSpace::neuron();
  CHECK_NOTHROW(spec.validate_for(cfg));

  InterventionSpec bad = spec;
  bad.components = {};
  CHECK_THROWS_AS(bad.validate_for(cfg), std::invalid_argument);
  bad = spec;
  bad.components = {12};
  CHECK_THROWS_AS(bad.validate_for(cfg), std::invalid_argument);
  bad = spec;
  bad.components = {-1};
  CHECK_THROWS_AS(bad.validate_for(cfg), std::invalid_argument);
  bad = spec;
  bad.components = {3, 3};
  CHECK_THROWS_AS(bad.validate_for(cfg), std::invalid_argument);
  bad = spec;
  bad.gamma = -0.1;
  CHECK_THROWS_AS(bad.validate_for(cfg), std::invalid_argument);
  bad = spec;
  bad.layer = 2;
  CHECK_THROWS_AS(bad.validate_for(cfg), std::invalid_argument);

  // Feature space widens the index range and checks the autoencoder width.
  InterventionSpec feat = spec;
  feat.space = ComponentSpace::features(sae);
  feat.components = {23};
  CHECK_NOTHROW(feat.validate_for(cfg));
  feat.components = {24};
  CHECK_THROWS_AS(feat.validate_for(cfg), std::invalid_argument);

  SaeConfig narrow = sae_config();
  narrow.input_dim = 8;
  Sae mismatched(narrow);
  feat.space = ComponentSpace::features(mismatched);
  feat.components = {0};
  CHECK_THROWS_AS(feat.validate_for(cfg), std::invalid_argument);

  CHECK_THROWS_AS(intervened_generate(policy, bad, tiny_prompt(), GenMode::greedy(), 8,
                                      tok::kEos),
                  std::invalid_argument);
}

TEST_CASE("behavior evaluation is deterministic and self-consistent") {
  Policy policy(tiny_config());
  TaskSpec spec;
  spec.kind = TaskKind::ParityChain;
  spec.len_min = 3;
  spec.len_max = 4;
  std::vector<Instance> dataset = gen_instances(spec, 4, 9);

  BehaviorReport a = eval_behavior(policy, nullptr, dataset, SignalFn::binary(),
                                   GenMode::greedy(), 10);
  BehaviorReport b = eval_behavior(policy, nullptr, dataset, SignalFn::binary(),
                                   GenMode::greedy(), 10);

  CHECK(a.metric == "accuracy");
  CHECK(a.value == a.accuracy);
  CHECK(a.accuracy >= 0.0);
  CHECK(a.accuracy <= 1.0);
  CHECK(a.mean_length > 0.0);
  CHECK(a.outcomes.size() == 4);
  CHECK_FALSE(a.intervened);
  CHECK(a.decode == "greedy");

  CHECK(a.value == b.value);
  CHECK(a.mean_length == b.mean_length);
  CHECK(a.dataset == b.dataset);
  REQUIRE(a.outcomes.size() == b.outcomes.size());
  for (size_t i = 0; i < a.outcomes.size(); ++i) {
    CHECK(a.outcomes[i].seed == b.outcomes[i].seed);
    CHECK(a.outcomes[i].reward == b.outcomes[i].reward);
    CHECK(a.outcomes[i].length == b.outcomes[i].length);
    CHECK(a.outcomes[i].correct == b.outcomes[i].correct);
  }

  // Aggregates recompute from the per-instance rows.
  double correct = 0.0, len = 0.0;
  for (const BehaviorOutcome& o : a.outcomes) {
    CHECK(o.reward == (o.correct ? 1.0 : 0.0));
    correct += o.correct ? 1.0 : 0.0;
    len += o.length;
  }
  CHECK(a.accuracy == doctest::Approx(correct / 4.0));
  CHECK(a.mean_length == doctest::Approx(len / 4.0));
  CHECK(a.outcomes[0].seed == dataset[0].seed);
}

TEST_CASE("length signal switches the headline metric") {
  Policy policy(tiny_config());
  TaskSpec spec;
  spec.kind = TaskKind::ParityChain;
  spec.len_min = 3;
  spec.len_max = 3;
  std::vector<Instance> dataset = gen_instances(spec, 3, 2);

  BehaviorReport r = eval_behavior(policy, nullptr, dataset, SignalFn::length(), GenMode::greedy(),
                                   10);
  CHECK(r.metric == "mean-length");
  CHECK(r.value == doctest::Approx(r.mean_length));
  for (const BehaviorOutcome& o : r.outcomes)
    CHECK(o.reward == doctest::Approx(static_cast<double>(o.length)));

  SignalFn flat = SignalFn::custom([](const std::vector<int>&, const std::vector<int>&) {
    return 2.5;
  });
  BehaviorReport c = eval_behavior(policy, nullptr, dataset, flat, GenMode::greedy(), 10);
  CHECK(c.metric == "mean-reward");
  CHECK(c.value == doctest::Approx(2.5));
}

TEST_CASE("identity intervention leaves the report unchanged") {
  Policy policy(tiny_config());
  TaskSpec spec;
  spec.kind = TaskKind::ModArithChain;
  spec.modulus = 7;
  spec.len_min = 2;
  spec.len_max = 2;
  std::vector<Instance> dataset = gen_instances(spec, 3, 5);

  InterventionSpec ident;
  ident.layer = 1;
  ident.gamma = 1.0;
  ident.components = {4, 8};
  ident.space = ComponentSpace::neuron();

  BehaviorReport base = eval_behavior(policy, nullptr, dataset, SignalFn::binary(),
                                      GenMode::greedy(), 10);
  BehaviorReport same = eval_behavior(policy, &ident, dataset, SignalFn::binary(),
                                      GenMode::greedy(), 10);
  CHECK(base.value == same.value);
  CHECK(base.mean_length == same.mean_length);
  REQUIRE(base.outcomes.size() == same.outcomes.size());
  for (size_t i = 0; i < base.outcomes.size(); ++i) {
    CHECK(base.outcomes[i].reward == same.outcomes[i].reward);
    CHECK(base.outcomes[i].length == same.outcomes[i].length);
  }
  CHECK(same.intervened);
  CHECK(same.layer == 1);
  CHECK(same.space == "neuron");
  CHECK(same.gamma == 1.0);
  CHECK(same.components == std::vector<int64_t>{4, 8});

  CHECK_THROWS_AS(eval_behavior(policy, nullptr, {}, SignalFn::binary(), GenMode::greedy(), 10),
                  std::invalid_argument);
}

TEST_CASE("intervention specs round-trip through text") {
  const std::string path = scratch_path("spec.txt");

  InterventionSpec spec;
  spec.layer = 1;
  spec.gamma = 1.1;
  spec.components = {3, 9, 41};
  spec.space = ComponentSpace::neuron();
  save_intervention(path, spec);
  InterventionSpec r = load_intervention(path);
  CHECK(r.layer == 1);
  CHECK(r.gamma == 1.1);
  CHECK(r.components == spec.components);
  CHECK_FALSE(r.space.is_features());

  Sae sae(sae_config());
  spec.space = ComponentSpace::features(sae);
  spec.gamma = 0.0;
  save_intervention(path, spec);
  CHECK_THROWS_AS(load_intervention(path), std::invalid_argument);
  InterventionSpec f = load_intervention(path, &sae);
  CHECK(f.space.is_features());
  CHECK(f.space.model == &sae);
  CHECK(f.gamma == 0.0);
  CHECK(f.components == spec.components);

  std::remove(path.c_str());
}

TEST_CASE("intervention IO rejects malformed input") {
  const std::string path = scratch_path("bad_spec.txt");

  InterventionSpec spec;
  spec.layer = 0;
  spec.gamma = 1.0;
  spec.components = {1};
  spec.space = ComponentSpace::neuron();

  SUBCASE("save rejects invalid specs") {
    InterventionSpec bad = spec;
    bad.components = {};
    CHECK_THROWS_AS(save_intervention(path, bad), std::invalid_argument);
    bad = spec;
    bad.gamma = -1.0;
    CHECK_THROWS_AS(save_intervention(path, bad), std::invalid_argument);
    bad = spec;
    bad.components = {2, 2};
    CHECK_THROWS_AS(save_intervention(path, bad), std::invalid_argument);
  }

  SUBCASE("wrong header") {
    write_text_file(path, "ipg-score-table v1\nlayer 0\n");
    CHECK_THROWS_AS(load_intervention(path), std::runtime_error);
  }

  SUBCASE("truncated body") {
    write_text_file(path, "ipg-intervention v1\nlayer 0\nspace neuron\n");
    CHECK_THROWS_AS(load_intervention(path), std::runtime_error);
  }

  SUBCASE("unknown space tag") {
    write_text_file(path, "ipg-intervention v1\nlayer 0\nspace mlp\ngamma 1\nindices 0\n");
    CHECK_THROWS_AS(load_intervention(path), std::runtime_error);
  }

  SUBCASE("trailing content") {
    write_text_file(path, "ipg-intervention v1\nlayer 0\nspace neuron\ngamma 1\nindices 0\nx\n");
    CHECK_THROWS_AS(load_intervention(path), std::runtime_error);
  }

  std::remove(path.c_str());
}

TEST_CASE("behavior reports serialize to CSV and JSON") {
  Policy policy(tiny_config());
  TaskSpec spec;
  spec.kind = TaskKind::ParityChain;
  spec.len_min = 3;
  spec.len_max = 3;
  std::vector<Instance> dataset = gen_instances(spec, 3, 4);

  InterventionSpec iv;
  iv.layer = 0;
  iv.gamma = 0.5;
  iv.components = {2, 7};
  iv.space = ComponentSpace::neuron();

  BehaviorReport rep = eval_behavior(policy, &iv, dataset, SignalFn::binary(), GenMode::greedy(),
                                     10);

  const std::string csv_path = scratch_path("report.csv");
  const std::string json_path = scratch_path("report.json");
  save_behavior_csv(csv_path, rep);
  save_behavior_json(json_path, rep);

  std::string csv = read_text_file(csv_path);
  std::vector<std::string> lines;
  size_t pos = 0;
  while (pos < csv.size()) {
    size_t nl = csv.find('\n', pos);
    lines.push_back(csv.substr(pos, nl - pos));
    pos = nl + 1;
  }
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "index,seed,reward,length,correct");
  char want[128];
  std::snprintf(want, sizeof want, "0,%llu,%.17g,%d,%d",
                static_cast<unsigned long long>(rep.outcomes[0].seed), rep.outcomes[0].reward,
                rep.outcomes[0].length, rep.outcomes[0].correct ? 1 : 0);
  CHECK(lines[1] == want);

  nlohmann::json j = nlohmann::json::parse(read_text_file(json_path));
  CHECK(j.at("metric").get<std::string>() == "accuracy");
  CHECK(j.at("value").get<double>() == rep.value);
  CHECK(j.at("accuracy").get<double>() == rep.accuracy);
  CHECK(j.at("mean_length").get<double>() == rep.mean_length);
  CHECK(j.at("count").get<int>() == 3);
  CHECK(j.at("decode").get<std::string>() == "greedy");
  CHECK(j.at("intervened").get<bool>());
  CHECK(j.at("intervention").at("gamma").get<double>() == 0.5);
  CHECK(j.at("intervention").at("space").get<std::string>() == "neuron");
  CHECK(j.at("intervention").at("components").get<std::vector<int64_t>>() ==
        std::vector<int64_t>{2, 7});

  std::remove(csv_path.c_str());
  std::remove(json_path.c_str());
}
