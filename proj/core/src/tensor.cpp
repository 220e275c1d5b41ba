#include "ipg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "ipg/common.hpp"

namespace ipg {

namespace {

std::atomic<uint64_t> next_storage_id{1};

int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

}  // namespace

struct Tensor::Storage {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  uint64_t id = 0;
};

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto s = std::make_shared<Storage>();
  for (int64_t d : shape)
    if (d <= 0) fail("tensor", "non-positive dimension");
  s->data.assign(static_cast<size_t>(shape_size(shape)), 0.0);
  s->shape = std::move(shape);
  s->requires_grad = requires_grad;
  s->id = next_storage_id.fetch_add(1);
  return Tensor(std::move(s));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.s_->data.begin(), t.s_->data.end(), value);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full(Shape{}, value, requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != static_cast<int64_t>(values.size()))
    fail("tensor", "value count does not match shape");
  Tensor t = zeros(std::move(shape), requires_grad);
  t.s_->data = std::move(values);
  return t;
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.s_->data) v = stddev * normal_unit(rng);
  return t;
}

const Shape& Tensor::shape() const { return s_->shape; }
int64_t Tensor::size() const { return static_cast<int64_t>(s_->data.size()); }
int64_t Tensor::rank() const { return static_cast<int64_t>(s_->shape.size()); }

int64_t Tensor::rows() const { return rank() < 2 ? 1 : s_->shape[0]; }
int64_t Tensor::cols() const {
  if (rank() == 0) return 1;
  return s_->shape.back();
}

double* Tensor::data() { return s_->data.data(); }
const double* Tensor::data() const { return s_->data.data(); }
double Tensor::at(int64_t i) const { return s_->data.at(static_cast<size_t>(i)); }
double Tensor::at(int64_t r, int64_t c) const {
  return s_->data.at(static_cast<size_t>(r * cols() + c));
}
double& Tensor::mut(int64_t i) { return s_->data.at(static_cast<size_t>(i)); }
double& Tensor::mut(int64_t r, int64_t c) {
  return s_->data.at(static_cast<size_t>(r * cols() + c));
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("tensor: item() on non-scalar");
  return s_->data[0];
}

bool Tensor::requires_grad() const { return s_->requires_grad; }
uint64_t Tensor::id() const { return s_->id; }

Tensor Tensor::clone() const {
  Tensor t = zeros(s_->shape, s_->requires_grad);
  t.s_->data = s_->data;
  return t;
}

bool GradMap::contains(const Tensor& t) const { return grads_.count(t.id()) > 0; }

Tensor GradMap::at(const Tensor& t) const {
  auto it = grads_.find(t.id());
  if (it == grads_.end()) return Tensor::zeros(t.shape());
  return it->second;
}

void GradMap::add(const Tensor& t, Tensor grad) { grads_.emplace(t.id(), std::move(grad)); }

namespace {

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) fail(op, "undefined tensor");
}

void check_finite(const Tensor& t, const char* op) {
  const double* p = t.data();
  for (int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(p[i])) fail(op, "non-finite input");
}

// Shapes must be equal after left-padding with 1s, except that an input may
// have size 1 on a set of axes forming a leading prefix of its padded shape.
void check_leading1(const Shape& a, const Shape& b, const char* op) {
  const size_t m = std::max(a.size(), b.size());
  auto padded = [m](const Shape& s, size_t k) -> int64_t {
    const size_t off = m - s.size();
    return k < off ? 1 : s[k - off];
  };
  for (const Shape* s : {&a, &b}) {
    int64_t first_real = -1, last_exp = -1;
    for (size_t k = 0; k < m; ++k) {
      const int64_t mine = padded(*s, k);
      const int64_t other = padded(s == &a ? b : a, k);
      if (mine != other && mine != 1 && other != 1) fail(op, "shape mismatch");
      if (mine == 1 && other > 1) last_exp = static_cast<int64_t>(k);
      if (mine > 1 && first_real < 0) first_real = static_cast<int64_t>(k);
    }
    if (first_real >= 0 && last_exp > first_real)
      fail(op, "broadcast beyond leading-1 expansion");
  }
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t m = std::max(a.size(), b.size());
  Shape out(m);
  for (size_t k = 0; k < m; ++k) {
    const int64_t da = k < m - a.size() ? 1 : a[k - (m - a.size())];
    const int64_t db = k < m - b.size() ? 1 : b[k - (m - b.size())];
    out[k] = std::max(da, db);
  }
  return out;
}

struct View2 {
  int64_t r, c;
};

View2 view2(const Tensor& t) {
  if (t.rank() == 0) return {1, 1};
  if (t.rank() == 1) return {1, t.shape()[0]};
  return {t.shape()[0], t.shape()[1]};
}

inline int64_t bindex(View2 v, int64_t i, int64_t j) {
  return (v.r == 1 ? 0 : i) * v.c + (v.c == 1 ? 0 : j);
}

}  // namespace

void Tape::note_inputs(std::initializer_list<const Tensor*> ins) {
  for (const Tensor* t : ins)
    if (t->requires_grad() && !produced_.count(t->id())) leaves_.emplace(t->id(), *t);
}

void Tape::record(const Tensor& out, std::function<void(Tape&)> fn) {
  if (consumed_) throw std::runtime_error("tape: already consumed");
  produced_.emplace(out.id(), out);
  ops_.push_back({out.id(), std::move(fn)});
}

void Tape::accumulate(const Tensor& t, const double* g, int64_t n) {
  auto it = grad_of_.find(t.id());
  if (it == grad_of_.end()) it = grad_of_.emplace(t.id(), Tensor::zeros(t.shape())).first;
  double* dst = it->second.data();
  for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

GradMap Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::runtime_error("tape: already consumed");
  check_defined(loss, "backward");
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  if (!produced_.count(loss.id()))
    throw std::invalid_argument("backward: loss was not produced by this tape");
  consumed_ = true;

  grad_of_.emplace(loss.id(), Tensor::full(loss.shape(), 1.0));
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it)
    if (grad_of_.count(it->out_id)) it->grad_fn(*this);

  GradMap result;
  for (auto& [id, leaf] : leaves_) {
    auto git = grad_of_.find(id);
    result.add(leaf, git == grad_of_.end() ? Tensor::zeros(leaf.shape()) : git->second);
  }
  grad_of_.clear();
  return result;
}

Tensor& Tape::grad_buffer(const Tensor& t) {
  auto it = grad_of_.find(t.id());
  if (it == grad_of_.end()) it = grad_of_.emplace(t.id(), Tensor::zeros(t.shape())).first;
  return it->second;
}

// ---- primitive ops ----

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  check_finite(a, "matmul");
  check_finite(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2) fail("matmul", "both operands must be rank 2");
  if (a.shape()[1] != b.shape()[0]) fail("matmul", "inner dimensions differ");
  const int64_t r = a.shape()[0], k = a.shape()[1], c = b.shape()[1];
  Tensor out = Tensor::zeros({r, c}, a.requires_grad() || b.requires_grad());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      const double* brow = pb + l * c;
      double* orow = po + i * c;
      for (int64_t j = 0; j < c; ++j) orow[j] += av * brow[j];
    }
  if (out.requires_grad()) {
    note_inputs({&a, &b});
    record(out, [a, b, out, r, k, c](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      if (a.requires_grad()) {
        Tensor ga = Tensor::zeros(a.shape());
        double* pga = ga.data();
        const double* pb2 = b.data();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t l = 0; l < k; ++l) {
            const double* grow = g + i * c;
            const double* brow = pb2 + l * c;
            double acc = 0;
            for (int64_t j = 0; j < c; ++j) acc += grow[j] * brow[j];
            pga[i * k + l] = acc;
          }
        t.accumulate(a, pga, a.size());
      }
      if (b.requires_grad()) {
        Tensor gb = Tensor::zeros(b.shape());
        double* pgb = gb.data();
        const double* pa2 = a.data();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t l = 0; l < k; ++l) {
            const double av = pa2[i * k + l];
            const double* grow = g + i * c;
            double* gbrow = pgb + l * c;
            for (int64_t j = 0; j < c; ++j) gbrow[j] += av * grow[j];
          }
        t.accumulate(b, pgb, b.size());
      }
    });
  }
  return out;
}

Tensor Tape::transpose(const Tensor& a) {
  check_defined(a, "transpose");
  check_finite(a, "transpose");
  if (a.rank() != 2) fail("transpose", "operand must be rank 2");
  const int64_t r = a.shape()[0], c = a.shape()[1];
  Tensor out = Tensor::zeros({c, r}, a.requires_grad());
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out.data()[j * r + i] = a.data()[i * c + j];
  if (out.requires_grad()) {
    note_inputs({&a});
    record(out, [a, out, r, c](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      Tensor ga = Tensor::zeros(a.shape());
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) ga.data()[i * c + j] = g[j * r + i];
      t.accumulate(a, ga.data(), a.size());
    });
  }
  return out;
}

namespace {
enum class BinKind { Add, Sub, Mul };
}

struct TapeOps {
  static Tensor binary_ew(Tape& tape, const Tensor& a, const Tensor& b, BinKind kind,
                          const char* name);
};

Tensor TapeOps::binary_ew(Tape& tape, const Tensor& a, const Tensor& b, BinKind kind,
                          const char* name) {
  check_defined(a, name);
  check_defined(b, name);
  check_finite(a, name);
  check_finite(b, name);
  check_leading1(a.shape(), b.shape(), name);
  Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::zeros(os, a.requires_grad() || b.requires_grad());
  const View2 vo = view2(out), va = view2(a), vb = view2(b);
  double* po = out.data();
  for (int64_t i = 0; i < vo.r; ++i)
    for (int64_t j = 0; j < vo.c; ++j) {
      const double x = a.data()[bindex(va, i, j)];
      const double y = b.data()[bindex(vb, i, j)];
      po[i * vo.c + j] = kind == BinKind::Add ? x + y : (kind == BinKind::Sub ? x - y : x * y);
    }
  if (out.requires_grad()) {
    tape.note_inputs({&a, &b});
    tape.record(out, [a, b, out, kind, vo, va, vb](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      if (a.requires_grad()) {
        Tensor ga = Tensor::zeros(a.shape());
        for (int64_t i = 0; i < vo.r; ++i)
          for (int64_t j = 0; j < vo.c; ++j) {
            const double gv = g[i * vo.c + j];
            ga.data()[bindex(va, i, j)] +=
                kind == BinKind::Mul ? gv * b.data()[bindex(vb, i, j)] : gv;
          }
        t.accumulate(a, ga.data(), a.size());
      }
      if (b.requires_grad()) {
        Tensor gb = Tensor::zeros(b.shape());
        for (int64_t i = 0; i < vo.r; ++i)
          for (int64_t j = 0; j < vo.c; ++j) {
            const double gv = g[i * vo.c + j];
            double v = gv;
            if (kind == BinKind::Mul) v = gv * a.data()[bindex(va, i, j)];
            if (kind == BinKind::Sub) v = -gv;
            gb.data()[bindex(vb, i, j)] += v;
          }
        t.accumulate(b, gb.data(), b.size());
      }
    });
  }
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  return TapeOps::binary_ew(*this, a, b, BinKind::Add, "add");
}
Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  return TapeOps::binary_ew(*this, a, b, BinKind::Sub, "sub");
}
Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  return TapeOps::binary_ew(*this, a, b, BinKind::Mul, "mul");
}

Tensor Tape::scale(const Tensor& a, double c) {
  check_defined(a, "scale");
  check_finite(a, "scale");
  if (!std::isfinite(c)) fail("scale", "non-finite factor");
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = c * a.data()[i];
  if (out.requires_grad()) {
    note_inputs({&a});
    record(out, [a, out, c](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      Tensor ga = Tensor::zeros(a.shape());
      for (int64_t i = 0; i < a.size(); ++i) ga.data()[i] = c * g[i];
      t.accumulate(a, ga.data(), a.size());
    });
  }
  return out;
}

Tensor Tape::relu(const Tensor& a) {
  check_defined(a, "relu");
  check_finite(a, "relu");
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] > 0 ? a.data()[i] : 0.0;
  if (out.requires_grad()) {
    note_inputs({&a});
    record(out, [a, out](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      Tensor ga = Tensor::zeros(a.shape());
      for (int64_t i = 0; i < a.size(); ++i) ga.data()[i] = a.data()[i] > 0 ? g[i] : 0.0;
      t.accumulate(a, ga.data(), a.size());
    });
  }
  return out;
}

Tensor Tape::gelu(const Tensor& a) {
  check_defined(a, "gelu");
  check_finite(a, "gelu");
  constexpr double inv_sqrt2 = 0.7071067811865476;
  constexpr double inv_sqrt2pi = 0.3989422804014327;
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  for (int64_t i = 0; i < a.size(); ++i) {
    const double x = a.data()[i];
    out.data()[i] = x * 0.5 * (1.0 + std::erf(x * inv_sqrt2));
  }
  if (out.requires_grad()) {
    note_inputs({&a});
    record(out, [a, out](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      Tensor ga = Tensor::zeros(a.shape());
      for (int64_t i = 0; i < a.size(); ++i) {
        const double x = a.data()[i];
        const double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double dens = inv_sqrt2pi * std::exp(-0.5 * x * x);
        ga.data()[i] = g[i] * (phi + x * dens);
      }
      t.accumulate(a, ga.data(), a.size());
    });
  }
  return out;
}

Tensor Tape::layer_norm(const Tensor& a) {
  check_defined(a, "layer_norm");
  check_finite(a, "layer_norm");
  if (a.rank() < 1) fail("layer_norm", "operand must have rank >= 1");
  constexpr double eps = 1e-5;
  const int64_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  std::vector<double> inv_std(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    const double* row = a.data() + i * c;
    double mean = 0;
    for (int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0;
    for (int64_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < c; ++j) out.data()[i * c + j] = (row[j] - mean) * is;
  }
  if (out.requires_grad()) {
    note_inputs({&a});
    record(out, [a, out, r, c, inv_std](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      Tensor ga = Tensor::zeros(a.shape());
      for (int64_t i = 0; i < r; ++i) {
        const double* y = out.data() + i * c;
        const double* gr = g + i * c;
        double gm = 0, gym = 0;
        for (int64_t j = 0; j < c; ++j) {
          gm += gr[j];
          gym += gr[j] * y[j];
        }
        gm /= static_cast<double>(c);
        gym /= static_cast<double>(c);
        const double is = inv_std[static_cast<size_t>(i)];
        for (int64_t j = 0; j < c; ++j)
          ga.data()[i * c + j] = is * (gr[j] - gm - y[j] * gym);
      }
      t.accumulate(a, ga.data(), a.size());
    });
  }
  return out;
}

Tensor Tape::causal_row_softmax(const Tensor& scores) {
  check_defined(scores, "causal_row_softmax");
  check_finite(scores, "causal_row_softmax");
  if (scores.rank() != 2 || scores.shape()[0] != scores.shape()[1])
    fail("causal_row_softmax", "operand must be square rank 2");
  const int64_t n = scores.shape()[0];
  Tensor out = Tensor::zeros(scores.shape(), scores.requires_grad());
  for (int64_t i = 0; i < n; ++i) {
    const double* row = scores.data() + i * n;
    double m = row[0];
    for (int64_t j = 1; j <= i; ++j) m = std::max(m, row[j]);
    double z = 0;
    for (int64_t j = 0; j <= i; ++j) z += std::exp(row[j] - m);
    for (int64_t j = 0; j <= i; ++j) out.data()[i * n + j] = std::exp(row[j] - m) / z;
  }
  if (out.requires_grad()) {
    note_inputs({&scores});
    record(out, [scores, out, n](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      Tensor gs = Tensor::zeros(scores.shape());
      for (int64_t i = 0; i < n; ++i) {
        const double* p = out.data() + i * n;
        const double* gr = g + i * n;
        double dot = 0;
        for (int64_t j = 0; j <= i; ++j) dot += gr[j] * p[j];
        for (int64_t j = 0; j <= i; ++j) gs.data()[i * n + j] = p[j] * (gr[j] - dot);
      }
      t.accumulate(scores, gs.data(), scores.size());
    });
  }
  return out;
}

Tensor Tape::softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  check_defined(logits, "softmax_cross_entropy");
  check_finite(logits, "softmax_cross_entropy");
  if (logits.rank() != 2) fail("softmax_cross_entropy", "logits must be rank 2");
  const int64_t r = logits.shape()[0], v = logits.shape()[1];
  if (static_cast<int64_t>(targets.size()) != r)
    fail("softmax_cross_entropy", "target count does not match rows");
  for (int tgt : targets)
    if (tgt < 0 || tgt >= v) fail("softmax_cross_entropy", "target out of range");
  Tensor out = Tensor::zeros({r}, logits.requires_grad());
  for (int64_t i = 0; i < r; ++i) {
    const double* row = logits.data() + i * v;
    double m = row[0];
    for (int64_t j = 1; j < v; ++j) m = std::max(m, row[j]);
    double z = 0;
    for (int64_t j = 0; j < v; ++j) z += std::exp(row[j] - m);
    out.data()[i] = m + std::log(z) - row[targets[static_cast<size_t>(i)]];
  }
  if (out.requires_grad()) {
    note_inputs({&logits});
    record(out, [logits, out, targets, r, v](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      Tensor gl = Tensor::zeros(logits.shape());
      for (int64_t i = 0; i < r; ++i) {
        const double* row = logits.data() + i * v;
        double m = row[0];
        for (int64_t j = 1; j < v; ++j) m = std::max(m, row[j]);
        double z = 0;
        for (int64_t j = 0; j < v; ++j) z += std::exp(row[j] - m);
        for (int64_t j = 0; j < v; ++j) {
          double p = std::exp(row[j] - m) / z;
          if (j == targets[static_cast<size_t>(i)]) p -= 1.0;
          gl.data()[i * v + j] = g[i] * p;
        }
      }
      t.accumulate(logits, gl.data(), logits.size());
    });
  }
  return out;
}

Tensor Tape::topk_mask(const Tensor& a, int64_t k) {
  check_defined(a, "topk_mask");
  check_finite(a, "topk_mask");
  if (a.rank() < 1 || a.rank() > 2) fail("topk_mask", "operand must be rank 1 or 2");
  const int64_t r = a.rows(), c = a.cols();
  if (k < 1 || k > c) fail("topk_mask", "k out of range");
  Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
  std::vector<int64_t> kept(static_cast<size_t>(r * k));
  std::vector<int64_t> idx(static_cast<size_t>(c));
  for (int64_t i = 0; i < r; ++i) {
    const double* row = a.data() + i * c;
    std::iota(idx.begin(), idx.end(), 0);
    std::nth_element(idx.begin(), idx.begin() + (k - 1), idx.end(), [row](int64_t x, int64_t y) {
      return row[x] > row[y] || (row[x] == row[y] && x < y);
    });
    for (int64_t j = 0; j < k; ++j) {
      const int64_t col = idx[static_cast<size_t>(j)];
      kept[static_cast<size_t>(i * k + j)] = col;
      out.data()[i * c + col] = row[col];
    }
  }
  if (out.requires_grad()) {
    note_inputs({&a});
    record(out, [a, out, kept, r, c, k](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      Tensor ga = Tensor::zeros(a.shape());
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < k; ++j) {
          const int64_t col = kept[static_cast<size_t>(i * k + j)];
          ga.data()[i * c + col] = g[i * c + col];
        }
      t.accumulate(a, ga.data(), a.size());
    });
  }
  return out;
}

Tensor Tape::gather_rows(const Tensor& table, const std::vector<int>& ids) {
  check_defined(table, "gather_rows");
  check_finite(table, "gather_rows");
  if (table.rank() != 2) fail("gather_rows", "table must be rank 2");
  const int64_t n = table.shape()[0], c = table.shape()[1];
  for (int id : ids)
    if (id < 0 || id >= n) fail("gather_rows", "row id out of range");
  const int64_t r = static_cast<int64_t>(ids.size());
  if (r == 0) fail("gather_rows", "empty id list");
  Tensor out = Tensor::zeros({r, c}, table.requires_grad());
  for (int64_t i = 0; i < r; ++i)
    std::memcpy(out.data() + i * c, table.data() + ids[static_cast<size_t>(i)] * c,
                static_cast<size_t>(c) * sizeof(double));
  if (out.requires_grad()) {
    note_inputs({&table});
    record(out, [table, out, ids, r, c](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      Tensor gt = Tensor::zeros(table.shape());
      for (int64_t i = 0; i < r; ++i) {
        double* dst = gt.data() + ids[static_cast<size_t>(i)] * c;
        for (int64_t j = 0; j < c; ++j) dst[j] += g[i * c + j];
      }
      t.accumulate(table, gt.data(), table.size());
    });
  }
  return out;
}

Tensor Tape::slice_cols(const Tensor& a, int64_t offset, int64_t len) {
  check_defined(a, "slice_cols");
  check_finite(a, "slice_cols");
  if (a.rank() != 2) fail("slice_cols", "operand must be rank 2");
  const int64_t r = a.shape()[0], c = a.shape()[1];
  if (offset < 0 || len < 1 || offset + len > c) fail("slice_cols", "range out of bounds");
  Tensor out = Tensor::zeros({r, len}, a.requires_grad());
  for (int64_t i = 0; i < r; ++i)
    std::memcpy(out.data() + i * len, a.data() + i * c + offset,
                static_cast<size_t>(len) * sizeof(double));
  if (out.requires_grad()) {
    note_inputs({&a});
    record(out, [a, out, offset, len, r, c](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      Tensor ga = Tensor::zeros(a.shape());
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < len; ++j) ga.data()[i * c + offset + j] = g[i * len + j];
      t.accumulate(a, ga.data(), a.size());
    });
  }
  return out;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat_cols", "empty part list");
  int64_t r = -1, total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    check_defined(p, "concat_cols");
    check_finite(p, "concat_cols");
    if (p.rank() != 2) fail("concat_cols", "parts must be rank 2");
    if (r < 0) r = p.shape()[0];
    if (p.shape()[0] != r) fail("concat_cols", "row counts differ");
    total += p.shape()[1];
    rg = rg || p.requires_grad();
  }
  Tensor out = Tensor::zeros({r, total}, rg);
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t c = p.shape()[1];
    for (int64_t i = 0; i < r; ++i)
      std::memcpy(out.data() + i * total + off, p.data() + i * c,
                  static_cast<size_t>(c) * sizeof(double));
    off += c;
  }
  if (rg) {
    for (const Tensor& p : parts) note_inputs({&p});
    record(out, [parts, out, r, total](Tape& t) {
      const double* g = t.grad_of_.at(out.id()).data();
      int64_t off2 = 0;
      for (const Tensor& p : parts) {
        const int64_t c = p.shape()[1];
        if (p.requires_grad()) {
          Tensor gp = Tensor::zeros(p.shape());
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) gp.data()[i * c + j] = g[i * total + off2 + j];
          t.accumulate(p, gp.data(), p.size());
        }
        off2 += c;
      }
    });
  }
  return out;
}

Tensor Tape::sum(const Tensor& a) {
  check_defined(a, "sum");
  check_finite(a, "sum");
  double s = 0;
  for (int64_t i = 0; i < a.size(); ++i) s += a.data()[i];
  Tensor out = Tensor::full(Shape{}, s, a.requires_grad());
  if (out.requires_grad()) {
    note_inputs({&a});
    record(out, [a, out](Tape& t) {
      const double g = t.grad_of_.at(out.id()).data()[0];
      Tensor ga = Tensor::full(a.shape(), g);
      t.accumulate(a, ga.data(), a.size());
    });
  }
  return out;
}

double finite_diff_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                         const Tensor& analytic_grad, double step) {
  if (!x.defined() || !analytic_grad.defined())
    throw std::invalid_argument("finite_diff_check: undefined tensor");
  if (x.shape() != analytic_grad.shape())
    throw std::invalid_argument("finite_diff_check: gradient shape mismatch");
  if (!(step > 0) || !std::isfinite(step))
    throw std::invalid_argument("finite_diff_check: bad step");

  Tensor probe = x.clone();
  const double f0 = f(probe);
  const double f1 = f(probe);
  if (std::memcmp(&f0, &f1, sizeof(double)) != 0)
    throw std::runtime_error("finite_diff_check: function is not deterministic");

  double max_err = 0;
  for (int64_t i = 0; i < probe.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + step;
    const double fp = f(probe);
    probe.data()[i] = orig - step;
    const double fm = f(probe);
    probe.data()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double analytic = analytic_grad.data()[i];
    const double err =
        std::fabs(analytic - numeric) / (std::fabs(analytic) + std::fabs(numeric) + 1e-12);
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace ipg
