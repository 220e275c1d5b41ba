#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ipg/common.hpp"
#include "ipg/policy.hpp"
#include "ipg/sae.hpp"

using namespace ipg;

namespace {

SaeConfig small_config(int64_t topk = 3, uint64_t seed = 5) {
  SaeConfig cfg;
  cfg.input_dim = 4;
  cfg.expansion = 2;
  cfg.topk = topk;
  cfg.init_seed = seed;
  return cfg;
}

Tensor random_rows(int64_t n, int64_t d, uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  Tensor out = Tensor::zeros({n, d});
  for (int64_t i = 0; i < out.size(); ++i) out.data()[i] = scale * normal_unit(rng);
  return out;
}

// Independent dense reference: pre[j] = sum_i (z[i] - b[i]) * enc[i][j].
std::vector<double> dense_preact(const Sae& sae, const Tensor& z, int64_t row) {
  const Tensor enc = sae.param("enc.w");
  const Tensor b = sae.param("pre.b");
  const int64_t n = sae.config().input_dim, m = sae.config().features();
  std::vector<double> pre(static_cast<size_t>(m), 0.0);
  for (int64_t j = 0; j < m; ++j)
    for (int64_t i = 0; i < n; ++i) pre[static_cast<size_t>(j)] += (z.at(row, i) - b.at(0, i)) * enc.at(i, j);
  return pre;
}

bool same_params(const Sae& a, const Sae& b) {
  const auto& pa = a.named_params();
  const auto& pb = b.named_params();
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first || pa[i].second.shape() != pb[i].second.shape()) return false;
    for (int64_t j = 0; j < pa[i].second.size(); ++j)
      if (pa[i].second.data()[j] != pb[i].second.data()[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(small_config().validate());
  CHECK_NOTHROW(small_config(8).validate());  // dense degenerate allowed
  SaeConfig bad = small_config();
  bad.input_dim = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = small_config();
  bad.expansion = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = small_config(0);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = small_config(9);  // above feature count
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("encoder starts as the decoder transpose with zero pre-bias") {
  Sae sae(small_config());
  const Tensor enc = sae.param("enc.w");
  const Tensor dec = sae.param("dec.w");
  const Tensor b = sae.param("pre.b");
  REQUIRE(enc.shape() == Shape{4, 8});
  REQUIRE(dec.shape() == Shape{8, 4});
  REQUIRE(b.shape() == Shape{1, 4});
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 8; ++j) CHECK(enc.at(i, j) == dec.at(j, i));
  for (int64_t i = 0; i < 4; ++i) CHECK(b.at(0, i) == 0.0);
}

TEST_CASE("dense degenerate encode equals the raw pre-activation") {
  Sae dense(small_config(8));
  Tensor z = random_rows(2, 4, 11);
  Tensor f = dense.encode(z);
  REQUIRE(f.shape() == Shape{2, 8});
  bool saw_negative = false;
  for (int64_t r = 0; r < 2; ++r) {
    const auto pre = dense_preact(dense, z, r);
    for (int64_t j = 0; j < 8; ++j) {
      CHECK(std::fabs(f.at(r, j) - pre[static_cast<size_t>(j)]) < 1e-12);
      if (f.at(r, j) < 0.0) saw_negative = true;
    }
  }
  CHECK(saw_negative);  // raw pre-activations survive, sign included
}

TEST_CASE("encode keeps exactly the k largest pre-activations") {
  Sae sae(small_config(3));
  Tensor z = random_rows(3, 4, 13);
  Tensor f = sae.encode(z);
  Sae dense(small_config(8));  // same seed, same weights, no truncation
  Tensor fd = dense.encode(z);
  for (int64_t r = 0; r < 3; ++r) {
    std::vector<int64_t> order(8);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      return fd.at(r, a) > fd.at(r, b) || (fd.at(r, a) == fd.at(r, b) && a < b);
    });
    int64_t nonzero = 0;
    for (int64_t j = 0; j < 8; ++j)
      if (f.at(r, j) != 0.0) ++nonzero;
    CHECK(nonzero <= 3);
    for (int64_t rank = 0; rank < 8; ++rank) {
      const int64_t j = order[static_cast<size_t>(rank)];
      if (rank < 3)
        CHECK(f.at(r, j) == fd.at(r, j));  // survivor equals the dense value
      else
        CHECK(f.at(r, j) == 0.0);
    }
    const auto active = active_features(f, r);
    CHECK(static_cast<int64_t>(active.size()) == nonzero);
    for (size_t i = 1; i < active.size(); ++i) CHECK(active[i - 1].first < active[i].first);
  }
}

TEST_CASE("encoding the pre-bias itself gives an all-zero feature row") {
  Sae sae(small_config(3));
  Tensor b = sae.param("pre.b");
  for (int64_t i = 0; i < 4; ++i) b.mut(0, i) = 0.25 * static_cast<double>(i + 1);
  Tensor z = Tensor::zeros({1, 4});
  for (int64_t i = 0; i < 4; ++i) z.mut(0, i) = b.at(0, i);
  Tensor f = sae.encode(z);
  for (int64_t j = 0; j < 8; ++j) CHECK(f.at(0, j) == 0.0);
}

TEST_CASE("decode matches the by-hand reconstruction") {
  Sae sae(small_config(3));
  Tensor b = sae.param("pre.b");
  b.mut(0, 2) = -0.5;
  Tensor f = Tensor::zeros({1, 8});
  f.mut(0, 1) = 2.0;
  f.mut(0, 6) = -1.25;
  Tensor out = sae.decode(f);
  const Tensor dec = sae.param("dec.w");
  for (int64_t i = 0; i < 4; ++i) {
    const double want = 2.0 * dec.at(1, i) + (-1.25) * dec.at(6, i) + b.at(0, i);
    CHECK(std::fabs(out.at(0, i) - want) < 1e-12);
  }
}

TEST_CASE("decoding with the error term restores the input") {
  Sae sae(small_config(3, 17));
  Tensor z = random_rows(5, 4, 19);
  Tensor recon = sae.reconstruct(z);
  Tensor err = sae.error(z);
  for (int64_t r = 0; r < 5; ++r)
    for (int64_t i = 0; i < 4; ++i)
      CHECK(std::fabs((recon.at(r, i) + err.at(r, i)) - z.at(r, i)) < 1e-12);
}

TEST_CASE("bumping one feature shifts the reconstruction along its decoder row") {
  Sae sae(small_config(3, 23));
  Tensor z = random_rows(1, 4, 29);
  Tensor f = sae.encode(z);
  Tensor base = sae.decode(f);
  Tensor bumped = f.clone();
  bumped.mut(0, 5) += 0.75;
  Tensor moved = sae.decode(bumped);
  const Tensor dec = sae.param("dec.w");
  for (int64_t i = 0; i < 4; ++i)
    CHECK(std::fabs((moved.at(0, i) - base.at(0, i)) - 0.75 * dec.at(5, i)) < 1e-12);
}

TEST_CASE("fvu closed forms") {
  Tensor z = Tensor::from({2, 2}, {0.0, 0.0, 1.0, 2.0});
  CHECK(fvu(z, z) == 0.0);

  Tensor mean_hat = Tensor::from({2, 2}, {0.5, 1.0, 0.5, 1.0});
  CHECK(fvu(z, mean_hat) == doctest::Approx(1.0).epsilon(1e-14));

  Tensor offset = Tensor::from({2, 2}, {0.5, 0.5, 1.5, 2.5});  // z + 0.5 everywhere
  // summed squared error 4*0.25 = 1, summed variance 2.5
  CHECK(fvu(z, offset) == doctest::Approx(0.4).epsilon(1e-14));

  Tensor flat = Tensor::from({2, 2}, {1.0, 2.0, 1.0, 2.0});
  CHECK_THROWS_AS((void)fvu(flat, z), std::invalid_argument);
  Tensor wrong = Tensor::zeros({3, 2});
  CHECK_THROWS_AS((void)fvu(z, wrong), std::invalid_argument);
}

TEST_CASE("training recovers a low-rank signal") {
  std::mt19937_64 rng(derive_seed(7, "low-rank-data"));
  const int64_t n = 8, rows = 256;
  std::vector<double> u(n), v(n);
  for (auto& x : u) x = normal_unit(rng);
  for (auto& x : v) x = normal_unit(rng);
  Tensor data = Tensor::zeros({rows, n});
  for (int64_t r = 0; r < rows; ++r) {
    const double c1 = normal_unit(rng), c2 = normal_unit(rng);
    for (int64_t i = 0; i < n; ++i)
      data.mut(r, i) = 0.5 + c1 * u[static_cast<size_t>(i)] + c2 * v[static_cast<size_t>(i)];
  }

  SaeConfig cfg;
  cfg.input_dim = n;
  cfg.expansion = 2;
  cfg.topk = 4;
  cfg.init_seed = 3;
  Sae sae(cfg);
  SaeTrainOptions opt;
  opt.steps = 1500;
  opt.batch = 32;
  opt.lr = 5e-3;
  opt.seed = 9;
  SaeTrainStats stats = train_sae(sae, data, opt);
  CHECK(stats.final_fvu < 0.01);
  CHECK(stats.final_fvu < stats.initial_fvu);
  CHECK(std::isfinite(stats.final_loss));

  // sparsity bound holds on the trained model too
  Tensor f = sae.encode(data);
  for (int64_t r = 0; r < rows; ++r) {
    int64_t nonzero = 0;
    for (int64_t j = 0; j < cfg.features(); ++j)
      if (f.at(r, j) != 0.0) ++nonzero;
    CHECK(nonzero <= cfg.topk);
  }
}

TEST_CASE("zero training steps change nothing and report the initial fvu") {
  Sae sae(small_config(3, 31));
  Sae untouched(small_config(3, 31));
  Tensor data = random_rows(16, 4, 37);
  SaeTrainOptions opt;
  opt.steps = 0;
  SaeTrainStats stats = train_sae(sae, data, opt);
  CHECK(same_params(sae, untouched));
  CHECK(stats.final_fvu == stats.initial_fvu);
  CHECK(stats.fvu_curve.empty());
}

TEST_CASE("fvu curve is sampled at the logging interval") {
  Sae sae(small_config(3, 41));
  Tensor data = random_rows(32, 4, 43);
  SaeTrainOptions opt;
  opt.steps = 120;
  opt.log_every = 50;
  opt.seed = 4;
  SaeTrainStats stats = train_sae(sae, data, opt);
  REQUIRE(stats.fvu_curve.size() == 3);
  CHECK(stats.fvu_curve[0].first == 50);
  CHECK(stats.fvu_curve[1].first == 100);
  CHECK(stats.fvu_curve[2].first == 120);
  CHECK(stats.fvu_curve[2].second == stats.final_fvu);
}

TEST_CASE("checkpoint round trip is bitwise and kinds are enforced") {
  Sae sae(small_config(3, 47));
  sae.param("pre.b").mut(0, 1) = 0.125;
  const std::string path = "sae_roundtrip.ckpt";
  sae.save(path);
  Sae back = Sae::load(path);
  CHECK(same_params(sae, back));
  CHECK(back.config().topk == 3);
  CHECK(back.config().init_seed == 47);

  PolicyConfig pcfg;
  pcfg.vocab = 17;
  pcfg.context = 16;
  pcfg.layers = 1;
  pcfg.dim = 8;
  pcfg.heads = 2;
  Policy policy(pcfg);
  const std::string ppath = "policy_kind.ckpt";
  policy.save(ppath);
  CHECK_THROWS_AS((void)Sae::load(ppath), std::runtime_error);
  CHECK_THROWS_AS((void)Policy::load(path), std::runtime_error);
  std::remove(path.c_str());
  std::remove(ppath.c_str());
}

TEST_CASE("feature steering scales selected decoder directions") {
  Sae sae(small_config(3, 53));
  Tensor z = random_rows(2, 4, 59);
  Tensor f = sae.encode(z);
  const Tensor dec = sae.param("dec.w");

  Tensor same = sae.steer_features(z, {1, 4}, 1.0);
  for (int64_t i = 0; i < z.size(); ++i) CHECK(same.data()[i] == z.data()[i]);
  Tensor none = sae.steer_features(z, {}, 0.0);
  for (int64_t i = 0; i < z.size(); ++i) CHECK(none.data()[i] == z.data()[i]);

  const std::vector<int64_t> sel = {0, 5, 7};
  Tensor damped = sae.steer_features(z, sel, 0.0);
  Tensor boosted = sae.steer_features(z, sel, 2.0);
  for (int64_t r = 0; r < 2; ++r)
    for (int64_t i = 0; i < 4; ++i) {
      double delta = 0;
      for (int64_t j : sel) delta += f.at(r, j) * dec.at(j, i);
      CHECK(std::fabs(damped.at(r, i) - (z.at(r, i) - delta)) < 1e-12);
      CHECK(std::fabs(boosted.at(r, i) - (z.at(r, i) + delta)) < 1e-12);
    }

  CHECK_THROWS_AS((void)sae.steer_features(z, {8}, 0.5), std::invalid_argument);
  CHECK_THROWS_AS((void)sae.steer_features(z, {-1}, 0.5), std::invalid_argument);
}

TEST_CASE("interpolation keeps bias and error and scales the feature part") {
  Sae sae(small_config(3, 61));
  Tensor z = random_rows(2, 4, 67);
  Tensor exact = sae.interpolate(z, 1.0);
  for (int64_t i = 0; i < z.size(); ++i) CHECK(exact.data()[i] == z.data()[i]);

  Tensor f = sae.encode(z);
  const Tensor dec = sae.param("dec.w");
  Tensor down = sae.interpolate(z, 0.25);
  for (int64_t r = 0; r < 2; ++r)
    for (int64_t i = 0; i < 4; ++i) {
      double recon = 0;
      for (int64_t j = 0; j < 8; ++j) recon += f.at(r, j) * dec.at(j, i);
      CHECK(std::fabs(down.at(r, i) - (z.at(r, i) - 0.75 * recon)) < 1e-12);
    }
}

TEST_CASE("encode and decode reject malformed input") {
  Sae sae(small_config());
  CHECK_THROWS_AS((void)sae.encode(Tensor::zeros({2, 5})), std::invalid_argument);
  CHECK_THROWS_AS((void)sae.encode(Tensor::zeros({4})), std::invalid_argument);
  CHECK_THROWS_AS((void)sae.decode(Tensor::zeros({2, 7})), std::invalid_argument);
  Tensor bad = Tensor::zeros({1, 4});
  bad.mut(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS((void)sae.encode(bad), std::invalid_argument);
  CHECK_THROWS_AS((void)active_features(Tensor::zeros({2, 8}), 2), std::invalid_argument);
}
