#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ipg/tensor.hpp"

namespace ipg {

struct SaeConfig {
  int64_t input_dim = 64;
  int64_t expansion = 16;
  int64_t topk = 32;
  uint64_t init_seed = 1;

  int64_t features() const { return expansion * input_dim; }
  void validate() const;
};

// TopK sparse autoencoder over residual rows. Parameters: "enc.w" (n, m),
// "dec.w" (m, n), "pre.b" (1, n); the encoder starts as the decoder transpose.
// TopK keeps the k largest raw pre-activations, so negative values survive.
class Sae {
 public:
  explicit Sae(SaeConfig config);

  const SaeConfig& config() const { return config_; }
  std::vector<std::pair<std::string, Tensor>>& named_params() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }
  Tensor param(const std::string& name) const;
  uint64_t param_hash() const;

  // Rows z (N, n) -> feature rows (N, m): TopK(W_enc (z - b_pre)) per row.
  Tensor encode(const Tensor& z) const;
  // Feature rows (N, m) -> W_dec f + b_pre; no error term.
  Tensor decode(const Tensor& f) const;
  Tensor reconstruct(const Tensor& z) const;  // decode(encode(z))
  Tensor error(const Tensor& z) const;        // z - reconstruct(z)

  // z' = z + (gamma - 1) * sum_{j in features} f_j * dec_row_j, per row, with
  // f = encode(z). gamma = 1 or an empty list returns z unchanged to the bit.
  Tensor steer_features(const Tensor& z, const std::vector<int64_t>& features,
                        double gamma) const;
  // Path point with every feature scaled by alpha and the bias/error part
  // kept: z + (alpha - 1) * (W_dec encode(z)). alpha = 1 is z to the bit.
  Tensor interpolate(const Tensor& z, double alpha) const;

  void save(const std::string& path) const;
  static Sae load(const std::string& path);

 private:
  SaeConfig config_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

// Nonzero entries of one feature row as (index, value), ascending by index.
std::vector<std::pair<int64_t, double>> active_features(const Tensor& f, int64_t row);

// Summed squared reconstruction error divided by the summed squared distance
// of z to its batch mean row. Throws when the batch has zero variance.
double fvu(const Tensor& z, const Tensor& zhat);

struct SaeTrainOptions {
  int steps = 2000;
  int batch = 32;
  double lr = 5e-3;
  uint64_t seed = 1;
  int log_every = 0;  // 0 silences progress; otherwise logs FVU at intervals
};

struct SaeTrainStats {
  double final_loss = 0.0;
  double initial_fvu = 0.0;
  double final_fvu = 0.0;
  std::vector<std::pair<int, double>> fvu_curve;
};

// Adam on the batch-mean squared reconstruction error (no error term),
// batches drawn from `data` with replacement. Throws if the loss goes
// non-finite, reporting the step.
SaeTrainStats train_sae(Sae& sae, const Tensor& data, const SaeTrainOptions& opt);

}  // namespace ipg
