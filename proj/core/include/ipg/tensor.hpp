#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace ipg {

using Shape = std::vector<int64_t>;

// Dense 64-bit float tensor, rank 0..2. Copies share storage; ops never alias
// input storage into outputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad = false);

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const;
  int64_t rank() const;
  // Row/column view of a rank-1 or rank-2 tensor; rank-1 counts as one row.
  int64_t rows() const;
  int64_t cols() const;

  double* data();
  const double* data() const;
  double at(int64_t i) const;
  double at(int64_t r, int64_t c) const;
  double& mut(int64_t i);
  double& mut(int64_t r, int64_t c);
  double item() const;  // scalar tensors only

  bool requires_grad() const;
  uint64_t id() const;  // storage identity, stable over the tensor's lifetime

  Tensor clone() const;

 private:
  struct Storage;
  std::shared_ptr<Storage> s_;
  explicit Tensor(std::shared_ptr<Storage> s) : s_(std::move(s)) {}
  friend class Tape;
};

// Gradients keyed by leaf storage identity. Leaves the loss never touched
// report zero tensors of the leaf's shape.
class GradMap {
 public:
  bool contains(const Tensor& t) const;
  Tensor at(const Tensor& t) const;
  void add(const Tensor& t, Tensor grad);

 private:
  std::unordered_map<uint64_t, Tensor> grads_;
};

// Records primitive ops in execution order (which is a topological order) and
// replays them in reverse on backward(). Single-owner: one forward/backward
// pass per tape, no sharing across threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // a: (r,k), b: (k,c) -> (r,c)
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);
  // Elementwise; shapes must match after leading-1 expansion of either input.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  Tensor relu(const Tensor& a);
  Tensor gelu(const Tensor& a);  // exact erf form
  // Normalizes each row to zero mean / unit variance (epsilon 1e-5), no affine.
  Tensor layer_norm(const Tensor& a);
  // Row i of the output is softmax over columns 0..i; columns > i are exactly
  // zero and receive exactly zero gradient.
  Tensor causal_row_softmax(const Tensor& scores);
  // Per-row loss: logsumexp(row) - row[target]. targets.size() == rows.
  Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets);
  // Keeps the k largest entries per row (rank-2) or globally (rank-1), zeroes
  // the rest. Ties break toward the lower index. Gradient passes through kept
  // entries only.
  Tensor topk_mask(const Tensor& a, int64_t k);
  Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
  Tensor slice_cols(const Tensor& a, int64_t offset, int64_t len);
  Tensor concat_cols(const std::vector<Tensor>& parts);
  Tensor sum(const Tensor& a);  // scalar

  // Reverse pass from a scalar loss produced by this tape. Consumes the tape;
  // a second call throws.
  GradMap backward(const Tensor& loss);

  size_t op_count() const { return ops_.size(); }

 private:
  struct Op {
    uint64_t out_id;
    std::function<void(Tape&)> grad_fn;
  };
  std::vector<Op> ops_;
  std::unordered_map<uint64_t, Tensor> grad_of_;
  std::unordered_map<uint64_t, Tensor> produced_;
  std::unordered_map<uint64_t, Tensor> leaves_;
  bool consumed_ = false;

  void note_inputs(std::initializer_list<const Tensor*> ins);
  void record(const Tensor& out, std::function<void(Tape&)> fn);
  Tensor& grad_buffer(const Tensor& t);
  void accumulate(const Tensor& t, const double* g, int64_t n);
  friend struct TapeOps;
};

// Central finite differences of f around x, compared against analytic.
// Evaluates f(x) twice first; a bitwise mismatch (non-deterministic f) throws.
// Returns max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
double finite_diff_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                         const Tensor& analytic_grad, double step);

}  // namespace ipg
