#include "ipg/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "ipg/checkpoint.hpp"
#include "ipg/common.hpp"
#include "policy_internal.hpp"

namespace ipg {

void PolicyConfig::validate() const {
  if (vocab < 2) throw std::invalid_argument("policy: vocab must be at least 2");
  if (context < 2) throw std::invalid_argument("policy: context must be at least 2");
  if (layers < 1) throw std::invalid_argument("policy: layers must be positive");
  if (dim < 1 || heads < 1 || dim % heads != 0)
    throw std::invalid_argument("policy: dim must be a positive multiple of heads");
}

GenMode GenMode::sample(double top_p, double temperature, uint64_t seed) {
  GenMode m;
  m.kind = Kind::Sample;
  m.top_p = top_p;
  m.temperature = temperature;
  m.seed = seed;
  return m;
}

namespace {

std::vector<std::pair<std::string, Shape>> param_layout(const PolicyConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("wte", Shape{c.vocab, c.dim});
  out.emplace_back("wpe", Shape{c.context, c.dim});
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.g", Shape{1, c.dim});
    out.emplace_back(p + "ln1.b", Shape{1, c.dim});
    out.emplace_back(p + "attn.wq", Shape{c.dim, c.dim});
    out.emplace_back(p + "attn.wk", Shape{c.dim, c.dim});
    out.emplace_back(p + "attn.wv", Shape{c.dim, c.dim});
    out.emplace_back(p + "attn.wo", Shape{c.dim, c.dim});
    out.emplace_back(p + "ln2.g", Shape{1, c.dim});
    out.emplace_back(p + "ln2.b", Shape{1, c.dim});
    out.emplace_back(p + "mlp.fc1", Shape{c.dim, 4 * c.dim});
    out.emplace_back(p + "mlp.fc2", Shape{4 * c.dim, c.dim});
  }
  out.emplace_back("lnf.g", Shape{1, c.dim});
  out.emplace_back("lnf.b", Shape{1, c.dim});
  out.emplace_back("head", Shape{c.dim, c.vocab});
  return out;
}

struct LayerView {
  const double *ln1g, *ln1b, *wq, *wk, *wv, *wo, *ln2g, *ln2b, *fc1, *fc2;
};

struct NetView {
  const double *wte, *wpe, *lnfg, *lnfb, *head;
  std::vector<LayerView> layers;
};

NetView net_view(const Policy& p) {
  NetView v;
  v.wte = p.param("wte").data();
  v.wpe = p.param("wpe").data();
  v.lnfg = p.param("lnf.g").data();
  v.lnfb = p.param("lnf.b").data();
  v.head = p.param("head").data();
  for (int l = 0; l < p.config().layers; ++l) {
    const std::string pre = "l" + std::to_string(l) + ".";
    LayerView lv;
    lv.ln1g = p.param(pre + "ln1.g").data();
    lv.ln1b = p.param(pre + "ln1.b").data();
    lv.wq = p.param(pre + "attn.wq").data();
    lv.wk = p.param(pre + "attn.wk").data();
    lv.wv = p.param(pre + "attn.wv").data();
    lv.wo = p.param(pre + "attn.wo").data();
    lv.ln2g = p.param(pre + "ln2.g").data();
    lv.ln2b = p.param(pre + "ln2.b").data();
    lv.fc1 = p.param(pre + "mlp.fc1").data();
    lv.fc2 = p.param(pre + "mlp.fc2").data();
    v.layers.push_back(lv);
  }
  return v;
}

// The plain kernels below mirror the taped ops loop for loop so that a
// generated trajectory re-scores to the same log-probabilities.
void mm(const double* a, int64_t r, int64_t k, const double* b, int64_t c, double* out) {
  std::fill(out, out + r * c, 0.0);
  for (int64_t i = 0; i < r; ++i)
    for (int64_t l = 0; l < k; ++l) {
      const double av = a[i * k + l];
      const double* brow = b + l * c;
      double* orow = out + i * c;
      for (int64_t j = 0; j < c; ++j) orow[j] += av * brow[j];
    }
}

void ln_affine(const double* x, int64_t rows, int64_t d, const double* g, const double* b,
               double* y) {
  constexpr double eps = 1e-5;
  for (int64_t i = 0; i < rows; ++i) {
    const double* row = x + i * d;
    double mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j) {
      const double n = (row[j] - mean) * is;
      y[i * d + j] = n * g[j] + b[j];
    }
  }
}

// Full forward over S tokens. Applies `hook` to residual rows >= hook_from at
// its layer; copies the block-`capture_layer` output into `capture` (S*dim).
void plain_forward(const NetView& net, const PolicyConfig& cfg, const std::vector<int>& toks,
                   const ResidualHook* hook, int64_t hook_from, int capture_layer,
                   double* capture, std::vector<double>& logits) {
  const int64_t S = static_cast<int64_t>(toks.size());
  const int64_t d = cfg.dim;
  const int64_t hd = d / cfg.heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  constexpr double inv_sqrt2 = 0.7071067811865476;

  std::vector<double> x(static_cast<size_t>(S * d));
  for (int64_t s = 0; s < S; ++s)
    for (int64_t j = 0; j < d; ++j)
      x[s * d + j] = net.wte[toks[static_cast<size_t>(s)] * d + j] + net.wpe[s * d + j];

  std::vector<double> a(static_cast<size_t>(S * d)), q(a.size()), k(a.size()), v(a.size());
  std::vector<double> ctx(a.size()), tmp(a.size());
  std::vector<double> scores(static_cast<size_t>(S * S)), probs(static_cast<size_t>(S * S));
  std::vector<double> f1(static_cast<size_t>(S * 4 * d));

  for (int L = 0; L < cfg.layers; ++L) {
    const LayerView& lw = net.layers[static_cast<size_t>(L)];
    ln_affine(x.data(), S, d, lw.ln1g, lw.ln1b, a.data());
    mm(a.data(), S, d, lw.wq, d, q.data());
    mm(a.data(), S, d, lw.wk, d, k.data());
    mm(a.data(), S, d, lw.wv, d, v.data());
    std::fill(ctx.begin(), ctx.end(), 0.0);
    for (int h = 0; h < cfg.heads; ++h) {
      const int64_t off = h * hd;
      std::fill(scores.begin(), scores.end(), 0.0);
      std::fill(probs.begin(), probs.end(), 0.0);
      for (int64_t i = 0; i < S; ++i) {
        double* srow = scores.data() + i * S;
        for (int64_t l = 0; l < hd; ++l) {
          const double qv = q[i * d + off + l];
          for (int64_t t = 0; t <= i; ++t) srow[t] += qv * k[t * d + off + l];
        }
        for (int64_t t = 0; t <= i; ++t) srow[t] *= inv_sqrt_hd;
        double m = srow[0];
        for (int64_t t = 1; t <= i; ++t) m = std::max(m, srow[t]);
        double z = 0;
        for (int64_t t = 0; t <= i; ++t) z += std::exp(srow[t] - m);
        double* prow = probs.data() + i * S;
        for (int64_t t = 0; t <= i; ++t) prow[t] = std::exp(srow[t] - m) / z;
      }
      for (int64_t i = 0; i < S; ++i)
        for (int64_t l = 0; l <= i; ++l) {
          const double pv = probs[i * S + l];
          for (int64_t j = 0; j < hd; ++j) ctx[i * d + off + j] += pv * v[l * d + off + j];
        }
    }
    mm(ctx.data(), S, d, lw.wo, d, tmp.data());
    for (size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];
    ln_affine(x.data(), S, d, lw.ln2g, lw.ln2b, a.data());
    mm(a.data(), S, d, lw.fc1, 4 * d, f1.data());
    for (auto& fv : f1) fv = fv * 0.5 * (1.0 + std::erf(fv * inv_sqrt2));
    mm(f1.data(), S, 4 * d, lw.fc2, d, tmp.data());
    for (size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];

    if (hook != nullptr && hook->layer == L)
      for (int64_t s = hook_from; s < S; ++s)
        hook->apply(std::span<double>(x.data() + s * d, static_cast<size_t>(d)));
    if (capture_layer == L && capture != nullptr)
      std::memcpy(capture, x.data(), x.size() * sizeof(double));
  }

  ln_affine(x.data(), S, d, net.lnfg, net.lnfb, a.data());
  logits.assign(static_cast<size_t>(S * cfg.vocab), 0.0);
  mm(a.data(), S, d, net.head, cfg.vocab, logits.data());
}

// Log-probability of token `a` under the untempered softmax of `row`. Matches
// the taped cross-entropy up to an exact sign flip.
double row_logprob(const double* row, int64_t vocab, int a) {
  double m = row[0];
  for (int64_t j = 1; j < vocab; ++j) m = std::max(m, row[j]);
  double z = 0;
  for (int64_t j = 0; j < vocab; ++j) z += std::exp(row[j] - m);
  return row[static_cast<int64_t>(a)] - (m + std::log(z));
}

int greedy_pick(const double* row, int64_t vocab) {
  int best = 0;
  for (int64_t j = 1; j < vocab; ++j)
    if (row[j] > row[best]) best = static_cast<int>(j);
  return best;
}

// Nucleus sampling: temperature-scaled softmax, smallest probability-sorted
// prefix reaching top_p, inverse-CDF draw within it. Ties sort by index so the
// kept set is reproducible.
int nucleus_pick(const double* row, int64_t vocab, double top_p, double temperature,
                 std::mt19937_64& rng) {
  std::vector<double> scaled(static_cast<size_t>(vocab));
  for (int64_t j = 0; j < vocab; ++j) scaled[static_cast<size_t>(j)] = row[j] / temperature;
  double m = scaled[0];
  for (int64_t j = 1; j < vocab; ++j) m = std::max(m, scaled[static_cast<size_t>(j)]);
  double z = 0;
  for (int64_t j = 0; j < vocab; ++j) z += std::exp(scaled[static_cast<size_t>(j)] - m);
  std::vector<double> prob(static_cast<size_t>(vocab));
  for (int64_t j = 0; j < vocab; ++j)
    prob[static_cast<size_t>(j)] = std::exp(scaled[static_cast<size_t>(j)] - m) / z;

  std::vector<int> order(static_cast<size_t>(vocab));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    return prob[static_cast<size_t>(x)] > prob[static_cast<size_t>(y)] ||
           (prob[static_cast<size_t>(x)] == prob[static_cast<size_t>(y)] && x < y);
  });

  size_t kept = 0;
  double mass = 0;
  for (size_t j = 0; j < order.size(); ++j) {
    mass += prob[static_cast<size_t>(order[j])];
    kept = j + 1;
    if (mass >= top_p) break;
  }
  const double u = uniform_unit(rng) * mass;
  double acc = 0;
  for (size_t j = 0; j < kept; ++j) {
    acc += prob[static_cast<size_t>(order[j])];
    if (u < acc) return order[j];
  }
  return order[kept - 1];
}

void check_tokens(const std::vector<int>& toks, int vocab, const char* what) {
  for (int t : toks)
    if (t < 0 || t >= vocab)
      throw std::invalid_argument(std::string("policy: ") + what + " token out of range");
}

void check_traj(const Policy& policy, const Trajectory& traj, int layer, const char* what) {
  const PolicyConfig& cfg = policy.config();
  if (layer < 0 || layer >= cfg.layers)
    throw std::invalid_argument(std::string("policy: ") + what + " layer out of range");
  if (traj.prompt.empty())
    throw std::invalid_argument(std::string("policy: ") + what + " needs a nonempty prompt");
  if (traj.generated.empty() || traj.logprobs.size() != traj.generated.size())
    throw std::invalid_argument(std::string("policy: ") + what +
                                " needs a nonempty generated sequence with logprobs");
  check_tokens(traj.prompt, cfg.vocab, what);
  check_tokens(traj.generated, cfg.vocab, what);
  const int64_t s = static_cast<int64_t>(traj.prompt.size()) + traj.length() - 1;
  if (s > cfg.context)
    throw std::invalid_argument(std::string("policy: ") + what +
                                " trajectory exceeds the context window");
}

}  // namespace

Policy::Policy(PolicyConfig config) : config_(config) {
  config_.validate();
  for (const auto& [name, shape] : param_layout(config_)) {
    Tensor t;
    if (name.ends_with(".g")) {
      t = Tensor::full(shape, 1.0, true);
    } else if (name.ends_with(".b")) {
      t = Tensor::zeros(shape, true);
    } else {
      std::mt19937_64 rng(derive_seed(config_.init_seed, name));
      t = Tensor::randn(shape, rng, 0.08, true);
    }
    params_.emplace_back(name, std::move(t));
  }
}

Tensor Policy::param(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw std::invalid_argument("policy: unknown parameter '" + name + "'");
}

uint64_t Policy::param_hash() const {
  uint64_t h = fnv1a64("policy-params");
  for (const auto& [name, t] : params_) {
    h = splitmix64(h ^ fnv1a64(name));
    h = splitmix64(h ^ fnv1a64(t.data(), static_cast<size_t>(t.size()) * sizeof(double)));
  }
  return h;
}

void Policy::save(const std::string& path) const {
  CheckpointPayload payload;
  payload.kind = kPolicyCheckpointKind;
  payload.meta.emplace_back("vocab", config_.vocab);
  payload.meta.emplace_back("context", config_.context);
  payload.meta.emplace_back("layers", config_.layers);
  payload.meta.emplace_back("dim", config_.dim);
  payload.meta.emplace_back("heads", config_.heads);
  payload.meta.emplace_back("init_seed", static_cast<int64_t>(config_.init_seed));
  payload.tensors = params_;
  save_checkpoint(path, payload);
}

Policy Policy::load(const std::string& path) {
  CheckpointPayload payload = load_checkpoint(path);
  if (payload.kind != kPolicyCheckpointKind)
    throw std::runtime_error("policy: '" + path + "' is not a policy checkpoint");
  PolicyConfig cfg;
  cfg.vocab = static_cast<int>(payload.meta_value("vocab"));
  cfg.context = static_cast<int>(payload.meta_value("context"));
  cfg.layers = static_cast<int>(payload.meta_value("layers"));
  cfg.dim = static_cast<int>(payload.meta_value("dim"));
  cfg.heads = static_cast<int>(payload.meta_value("heads"));
  cfg.init_seed = static_cast<uint64_t>(payload.meta_value("init_seed"));
  Policy out(cfg);
  if (payload.tensors.size() != out.params_.size())
    throw std::runtime_error("policy: checkpoint parameter count mismatch");
  for (auto& [name, t] : out.params_) {
    const Tensor* src = nullptr;
    for (const auto& [n, s] : payload.tensors)
      if (n == name) src = &s;
    if (src == nullptr) throw std::runtime_error("policy: checkpoint missing tensor '" + name + "'");
    if (src->shape() != t.shape())
      throw std::runtime_error("policy: checkpoint shape mismatch for '" + name + "'");
    std::memcpy(t.data(), src->data(), static_cast<size_t>(t.size()) * sizeof(double));
  }
  return out;
}

Trajectory generate(const Policy& policy, const std::vector<int>& prompt, const GenMode& mode,
                    int max_new_tokens, int stop_token, const ResidualHook* hook) {
  const PolicyConfig& cfg = policy.config();
  if (prompt.empty()) throw std::invalid_argument("policy: empty prompt");
  check_tokens(prompt, cfg.vocab, "prompt");
  if (max_new_tokens < 1) throw std::invalid_argument("policy: max_new_tokens must be positive");
  if (stop_token < 0 || stop_token >= cfg.vocab)
    throw std::invalid_argument("policy: stop token out of range");
  const int64_t p = static_cast<int64_t>(prompt.size());
  if (p + max_new_tokens - 1 > cfg.context)
    throw std::invalid_argument("policy: prompt plus max_new_tokens exceeds the context window");
  if (mode.kind == GenMode::Kind::Sample) {
    if (!(mode.top_p > 0.0) || mode.top_p > 1.0)
      throw std::invalid_argument("policy: top_p must be in (0, 1]");
    if (!(mode.temperature > 0.0))
      throw std::invalid_argument("policy: temperature must be positive");
  }
  if (hook != nullptr) {
    if (hook->layer < 0 || hook->layer >= cfg.layers)
      throw std::invalid_argument("policy: hook layer out of range");
    if (!hook->apply) throw std::invalid_argument("policy: hook has no transform");
  }

  const NetView net = net_view(policy);
  std::mt19937_64 rng(derive_seed(mode.seed, "generate"));
  Trajectory traj;
  traj.prompt = prompt;
  std::vector<int> toks = prompt;
  std::vector<double> logits;
  for (int step = 0; step < max_new_tokens; ++step) {
    plain_forward(net, cfg, toks, hook, p - 1, -1, nullptr, logits);
    const double* last = logits.data() + (static_cast<int64_t>(toks.size()) - 1) * cfg.vocab;
    const int tokn = mode.kind == GenMode::Kind::Greedy
                         ? greedy_pick(last, cfg.vocab)
                         : nucleus_pick(last, cfg.vocab, mode.top_p, mode.temperature, rng);
    traj.generated.push_back(tokn);
    traj.logprobs.push_back(row_logprob(last, cfg.vocab, tokn));
    toks.push_back(tokn);
    if (tokn == stop_token) break;
  }
  return traj;
}

Tensor record_hidden_states(const Policy& policy, const Trajectory& traj, int layer) {
  check_traj(policy, traj, layer, "record");
  const PolicyConfig& cfg = policy.config();
  const int64_t p = static_cast<int64_t>(traj.prompt.size());
  const int64_t t = traj.length();
  std::vector<int> toks = traj.prompt;
  toks.insert(toks.end(), traj.generated.begin(), traj.generated.end() - 1);
  const int64_t s = static_cast<int64_t>(toks.size());

  std::vector<double> capture(static_cast<size_t>(s * cfg.dim));
  std::vector<double> logits;
  plain_forward(net_view(policy), cfg, toks, nullptr, 0, layer, capture.data(), logits);

  Tensor out = Tensor::zeros({t, cfg.dim});
  std::memcpy(out.data(), capture.data() + (p - 1) * cfg.dim,
              static_cast<size_t>(t * cfg.dim) * sizeof(double));
  return out;
}

namespace detail {

Tensor taped_selected_ce(Tape& tape, const Policy& policy, const std::vector<int>& toks,
                         const std::vector<int>& score_rows, const std::vector<int>& targets,
                         int override_layer, const Tensor* override_rows) {
  const PolicyConfig& cfg = policy.config();
  const int64_t s = static_cast<int64_t>(toks.size());
  const int64_t d = cfg.dim;
  const int64_t hd = d / cfg.heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<int> pos(static_cast<size_t>(s));
  std::iota(pos.begin(), pos.end(), 0);
  Tensor x = tape.add(tape.gather_rows(policy.param("wte"), toks),
                      tape.gather_rows(policy.param("wpe"), pos));

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = "l" + std::to_string(l) + ".";
    Tensor a = tape.add(tape.mul(tape.layer_norm(x), policy.param(pre + "ln1.g")),
                        policy.param(pre + "ln1.b"));
    Tensor q = tape.matmul(a, policy.param(pre + "attn.wq"));
    Tensor k = tape.matmul(a, policy.param(pre + "attn.wk"));
    Tensor v = tape.matmul(a, policy.param(pre + "attn.wv"));
    std::vector<Tensor> heads;
    for (int h = 0; h < cfg.heads; ++h) {
      const int64_t off = h * hd;
      Tensor qh = tape.slice_cols(q, off, hd);
      Tensor kh = tape.slice_cols(k, off, hd);
      Tensor vh = tape.slice_cols(v, off, hd);
      Tensor st = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_hd);
      heads.push_back(tape.matmul(tape.causal_row_softmax(st), vh));
    }
    Tensor ctx = tape.concat_cols(heads);
    x = tape.add(x, tape.matmul(ctx, policy.param(pre + "attn.wo")));
    Tensor m = tape.add(tape.mul(tape.layer_norm(x), policy.param(pre + "ln2.g")),
                        policy.param(pre + "ln2.b"));
    Tensor f1 = tape.gelu(tape.matmul(m, policy.param(pre + "mlp.fc1")));
    x = tape.add(x, tape.matmul(f1, policy.param(pre + "mlp.fc2")));

    if (override_rows != nullptr && override_layer == l) {
      // Splice: identity on unscored rows, the override elsewhere. A 0/1
      // selection keeps kept rows bit-identical and routes gradients to the
      // override leaf.
      const int64_t t = static_cast<int64_t>(score_rows.size());
      Tensor keep = Tensor::zeros({s, s});
      for (int64_t i = 0; i < s; ++i) keep.mut(i, i) = 1.0;
      Tensor scatter = Tensor::zeros({s, t});
      for (int64_t i = 0; i < t; ++i) {
        keep.mut(score_rows[static_cast<size_t>(i)], score_rows[static_cast<size_t>(i)]) = 0.0;
        scatter.mut(score_rows[static_cast<size_t>(i)], i) = 1.0;
      }
      x = tape.add(tape.matmul(keep, x), tape.matmul(scatter, *override_rows));
    }
  }

  Tensor y = tape.add(tape.mul(tape.layer_norm(x), policy.param("lnf.g")), policy.param("lnf.b"));
  Tensor logits = tape.matmul(y, policy.param("head"));
  return tape.softmax_cross_entropy(tape.gather_rows(logits, score_rows), targets);
}

}  // namespace detail

ScoreResult score_with_override(const Policy& policy, const Trajectory& traj, int layer,
                                const Tensor& override_rows,
                                const std::vector<double>* grad_weights) {
  check_traj(policy, traj, layer, "score");
  const PolicyConfig& cfg = policy.config();
  const int64_t t = traj.length();
  if (!override_rows.defined() || override_rows.shape() != Shape{t, cfg.dim})
    throw std::invalid_argument("policy: override must be (generated length, dim)");
  if (grad_weights != nullptr && static_cast<int64_t>(grad_weights->size()) != t)
    throw std::invalid_argument("policy: gradient weight count must match generated length");

  const int64_t p = static_cast<int64_t>(traj.prompt.size());
  std::vector<int> toks = traj.prompt;
  toks.insert(toks.end(), traj.generated.begin(), traj.generated.end() - 1);
  std::vector<int> rows(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) rows[static_cast<size_t>(i)] = static_cast<int>(p - 1 + i);

  Tensor ov = Tensor::zeros({t, cfg.dim}, true);
  std::memcpy(ov.data(), override_rows.data(), static_cast<size_t>(ov.size()) * sizeof(double));

  Tape tape;
  Tensor ce = detail::taped_selected_ce(tape, policy, toks, rows, traj.generated, layer, &ov);

  ScoreResult out;
  out.logprobs.resize(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) out.logprobs[static_cast<size_t>(i)] = -ce.at(i);
  if (grad_weights != nullptr) {
    std::vector<double> negw(grad_weights->size());
    for (size_t i = 0; i < negw.size(); ++i) negw[i] = -(*grad_weights)[i];
    Tensor loss = tape.sum(tape.mul(ce, Tensor::from({t}, negw)));
    out.override_grads = tape.backward(loss).at(ov);
  } else {
    out.override_grads = Tensor::zeros({t, cfg.dim});
  }
  return out;
}

}  // namespace ipg
