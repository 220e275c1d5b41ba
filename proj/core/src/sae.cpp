#include "ipg/sae.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include "ipg/checkpoint.hpp"
#include "ipg/common.hpp"
#include "ipg/optim.hpp"

namespace ipg {

namespace {

void check_rows(const Tensor& t, int64_t want_cols, const char* what) {
  if (!t.defined() || t.rank() != 2 || t.shape()[1] != want_cols)
    throw std::invalid_argument(std::string("sae: ") + what + " must be rank 2 with " +
                                std::to_string(want_cols) + " columns");
  for (int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(t.data()[i]))
      throw std::invalid_argument(std::string("sae: ") + what + " has non-finite values");
}

}  // namespace

void SaeConfig::validate() const {
  if (input_dim < 1) throw std::invalid_argument("sae: input_dim must be positive");
  if (expansion < 1) throw std::invalid_argument("sae: expansion must be positive");
  if (topk < 1 || topk > features())
    throw std::invalid_argument("sae: topk must lie in [1, features]");
}

Sae::Sae(SaeConfig config) : config_(config) {
  config_.validate();
  const int64_t n = config_.input_dim, m = config_.features();
  std::mt19937_64 rng(derive_seed(config_.init_seed, "dec.w"));
  Tensor dec = Tensor::randn({m, n}, rng, 1.0 / std::sqrt(static_cast<double>(m)), true);
  Tensor enc = Tensor::zeros({n, m}, true);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) enc.mut(i, j) = dec.at(j, i);
  params_.emplace_back("enc.w", std::move(enc));
  params_.emplace_back("dec.w", std::move(dec));
  params_.emplace_back("pre.b", Tensor::zeros({1, n}, true));
}

Tensor Sae::param(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw std::invalid_argument("sae: unknown parameter '" + name + "'");
}

uint64_t Sae::param_hash() const {
  uint64_t h = fnv1a64("sae-params");
  for (const auto& [name, t] : params_) {
    h = splitmix64(h ^ fnv1a64(name));
    h = splitmix64(h ^ fnv1a64(t.data(), static_cast<size_t>(t.size()) * sizeof(double)));
  }
  return h;
}

Tensor Sae::encode(const Tensor& z) const {
  check_rows(z, config_.input_dim, "input");
  Tape t;
  return t.topk_mask(t.matmul(t.sub(z, param("pre.b")), param("enc.w")), config_.topk);
}

Tensor Sae::decode(const Tensor& f) const {
  check_rows(f, config_.features(), "feature rows");
  Tape t;
  return t.add(t.matmul(f, param("dec.w")), param("pre.b"));
}

Tensor Sae::reconstruct(const Tensor& z) const { return decode(encode(z)); }

Tensor Sae::error(const Tensor& z) const {
  Tensor recon = reconstruct(z);
  Tape t;
  return t.sub(z, recon);
}

Tensor Sae::steer_features(const Tensor& z, const std::vector<int64_t>& features,
                           double gamma) const {
  check_rows(z, config_.input_dim, "input");
  for (int64_t j : features)
    if (j < 0 || j >= config_.features())
      throw std::invalid_argument("sae: feature index out of range");
  if (gamma == 1.0 || features.empty()) return z.clone();

  Tensor mask = Tensor::zeros({1, config_.features()});
  for (int64_t j : features) mask.mut(0, j) = 1.0;
  Tape t;
  Tensor delta = t.matmul(t.mul(encode(z), mask), param("dec.w"));
  Tensor out = z.clone();
  for (int64_t i = 0; i < out.size(); ++i) out.data()[i] += (gamma - 1.0) * delta.data()[i];
  return out;
}

Tensor Sae::interpolate(const Tensor& z, double alpha) const {
  check_rows(z, config_.input_dim, "input");
  if (alpha == 1.0) return z.clone();
  Tape t;
  Tensor recon = t.matmul(encode(z), param("dec.w"));  // feature part only
  Tensor out = z.clone();
  for (int64_t i = 0; i < out.size(); ++i) out.data()[i] += (alpha - 1.0) * recon.data()[i];
  return out;
}

void Sae::save(const std::string& path) const {
  CheckpointPayload payload;
  payload.kind = kSaeCheckpointKind;
  payload.meta.emplace_back("input_dim", config_.input_dim);
  payload.meta.emplace_back("expansion", config_.expansion);
  payload.meta.emplace_back("topk", config_.topk);
  payload.meta.emplace_back("init_seed", static_cast<int64_t>(config_.init_seed));
  payload.tensors = params_;
  save_checkpoint(path, payload);
}

Sae Sae::load(const std::string& path) {
  CheckpointPayload payload = load_checkpoint(path);
  if (payload.kind != kSaeCheckpointKind)
    throw std::runtime_error("sae: '" + path + "' is not an autoencoder checkpoint");
  SaeConfig cfg;
  cfg.input_dim = payload.meta_value("input_dim");
  cfg.expansion = payload.meta_value("expansion");
  cfg.topk = payload.meta_value("topk");
  cfg.init_seed = static_cast<uint64_t>(payload.meta_value("init_seed"));
  Sae out(cfg);
  if (payload.tensors.size() != out.params_.size())
    throw std::runtime_error("sae: checkpoint parameter count mismatch");
  for (auto& [name, t] : out.params_) {
    const Tensor* src = nullptr;
    for (const auto& [n, s] : payload.tensors)
      if (n == name) src = &s;
    if (src == nullptr) throw std::runtime_error("sae: checkpoint missing tensor '" + name + "'");
    if (src->shape() != t.shape())
      throw std::runtime_error("sae: checkpoint shape mismatch for '" + name + "'");
    std::memcpy(t.data(), src->data(), static_cast<size_t>(t.size()) * sizeof(double));
  }
  return out;
}

std::vector<std::pair<int64_t, double>> active_features(const Tensor& f, int64_t row) {
  if (!f.defined() || f.rank() != 2 || row < 0 || row >= f.shape()[0])
    throw std::invalid_argument("sae: bad feature row");
  std::vector<std::pair<int64_t, double>> out;
  for (int64_t j = 0; j < f.shape()[1]; ++j)
    if (f.at(row, j) != 0.0) out.emplace_back(j, f.at(row, j));
  return out;
}

double fvu(const Tensor& z, const Tensor& zhat) {
  if (!z.defined() || !zhat.defined() || z.rank() != 2 || z.shape() != zhat.shape())
    throw std::invalid_argument("fvu: batches must be rank 2 with matching shapes");
  const int64_t rows = z.shape()[0], cols = z.shape()[1];
  for (int64_t i = 0; i < z.size(); ++i)
    if (!std::isfinite(z.data()[i]) || !std::isfinite(zhat.data()[i]))
      throw std::invalid_argument("fvu: non-finite values");
  std::vector<double> mean(static_cast<size_t>(cols), 0.0);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) mean[static_cast<size_t>(c)] += z.at(r, c);
  for (double& m : mean) m /= static_cast<double>(rows);
  double num = 0, den = 0;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) {
      const double e = z.at(r, c) - zhat.at(r, c);
      const double d = z.at(r, c) - mean[static_cast<size_t>(c)];
      num += e * e;
      den += d * d;
    }
  if (den == 0.0) throw std::invalid_argument("fvu: batch has zero variance");
  return num / den;
}

SaeTrainStats train_sae(Sae& sae, const Tensor& data, const SaeTrainOptions& opt) {
  check_rows(data, sae.config().input_dim, "training data");
  if (opt.steps < 0) throw std::invalid_argument("sae: negative step count");
  if (opt.batch < 1) throw std::invalid_argument("sae: batch must be positive");
  if (!(opt.lr > 0.0)) throw std::invalid_argument("sae: learning rate must be positive");

  SaeTrainStats stats;
  stats.initial_fvu = fvu(data, sae.reconstruct(data));
  stats.final_fvu = stats.initial_fvu;
  if (opt.steps == 0) return stats;

  Adam adam(opt.lr);
  std::mt19937_64 rng(derive_seed(opt.seed, "sae-batch"));
  auto& params = sae.named_params();
  const int64_t rows = data.shape()[0], n = data.shape()[1];

  for (int step = 0; step < opt.steps; ++step) {
    Tensor zb = Tensor::zeros({opt.batch, n});
    for (int b = 0; b < opt.batch; ++b) {
      const int64_t r = uniform_int(rng, 0, rows - 1);
      std::memcpy(zb.data() + b * n, data.data() + r * n, static_cast<size_t>(n) * sizeof(double));
    }
    Tape tape;
    Tensor center = tape.sub(zb, sae.param("pre.b"));
    Tensor f = tape.topk_mask(tape.matmul(center, sae.param("enc.w")), sae.config().topk);
    Tensor recon = tape.add(tape.matmul(f, sae.param("dec.w")), sae.param("pre.b"));
    Tensor diff = tape.sub(zb, recon);
    Tensor loss = tape.scale(tape.sum(tape.mul(diff, diff)), 1.0 / static_cast<double>(opt.batch));
    if (!std::isfinite(loss.item()))
      throw std::runtime_error("sae: loss went non-finite at step " + std::to_string(step));
    stats.final_loss = loss.item();
    adam.step(params, tape.backward(loss));

    if (opt.log_every > 0 && ((step + 1) % opt.log_every == 0 || step + 1 == opt.steps)) {
      const double v = fvu(data, sae.reconstruct(data));
      stats.fvu_curve.emplace_back(step + 1, v);
      std::printf("sae step %d/%d  loss %.6f  fvu %.6f\n", step + 1, opt.steps, stats.final_loss, v);
    }
  }

  if (!stats.fvu_curve.empty() && stats.fvu_curve.back().first == opt.steps)
    stats.final_fvu = stats.fvu_curve.back().second;
  else
    stats.final_fvu = fvu(data, sae.reconstruct(data));
  return stats;
}

}  // namespace ipg
