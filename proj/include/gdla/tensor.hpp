#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "gdla/errors.hpp"
#include "gdla/rng.hpp"

namespace gdla {

namespace detail {
struct TapeAccess;
}

// Dense row-major tensor of 64-bit reals. Values are immutable once
// constructed; copies share storage. When a tensor is marked grad_enabled
// (or is the output of an operation that involved one), operations record
// onto a thread-local tape so backward() can replay them in reverse.
//
// Construction and every public operation reject non-finite entries: given
// finite inputs, a NaN/Inf result raises NonFiniteError rather than
// propagating silently.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<size_t> shape, std::vector<double> values,
         bool grad_enabled = false);

  static Tensor zeros(std::vector<size_t> shape);
  static Tensor full(std::vector<size_t> shape, double value);
  static Tensor identity(size_t n);
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);
  // i.i.d. uniform entries in [lo, hi), drawn in row-major order.
  static Tensor random_uniform(std::vector<size_t> shape, double lo, double hi,
                               Rng& rng);

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const;
  // Rank-1 tensors are treated as a single row where a matrix is expected.
  size_t rows() const;
  size_t cols() const;
  std::string shape_str() const;  // e.g. "2x3"

  const std::vector<double>& values() const&;
  // Temporaries hand out a copy so ranged-for over op(...).values() is safe.
  std::vector<double> values() &&;
  double at(size_t flat) const;
  double at(size_t row, size_t col) const;
  // Value of a single-element tensor; ContractError otherwise.
  double scalar_value() const;

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  bool defined() const { return static_cast<bool>(data_); }

 private:
  std::vector<size_t> shape_;
  std::shared_ptr<const std::vector<double>> data_;
  bool grad_enabled_ = false;
  // Tape linkage, set only on operation outputs of the current graph.
  int node_ = -1;
  uint64_t graph_id_ = 0;

  friend struct detail::TapeAccess;
};

// ---------------------------------------------------------------------------
// Autograd control

// Discards the active graph and its leaf registrations. Call between
// training steps so the tape does not grow without bound; tensors created
// on earlier graphs remain usable as constants/leaves.
void new_graph();

// While alive, operations compute values only and record nothing.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Operations. All participate in the gradient graph when any input does.

// Standard matrix product, m-by-k times k-by-n.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);      // same shape
Tensor sub(const Tensor& a, const Tensor& b);      // same shape
Tensor mul(const Tensor& a, const Tensor& b);      // elementwise
Tensor divide(const Tensor& a, const Tensor& b);   // elementwise
Tensor scale(const Tensor& a, double c);
// m-by-n plus a length-n row vector broadcast over rows.
Tensor add_rowvec(const Tensor& m, const Tensor& row);
// Broadcast multiply by a single-element tensor.
Tensor scale_by(const Tensor& m, const Tensor& scalar);

Tensor relu(const Tensor& a);
// Elementwise logistic 1/(1+e^-x), saturation-safe at large |x|.
Tensor sigmoid(const Tensor& a);

// Row-wise softmax with mandatory max subtraction: rows sum to 1 and no
// overflow occurs for any finite input.
Tensor softmax_rows(const Tensor& x);

// Per-row Euclidean norm of an m-by-n matrix, returned as m-by-1 and
// floored at eps so downstream division is always defined.
Tensor row_l2_norms(const Tensor& x, double eps);

// Row-wise normalization to zero mean / unit variance (denominator n),
// then scale by gain and shift by bias (both length-n vectors).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);

// Mean over the batch of -log softmax(logits_b)[label_b], computed in
// log space. Optional per-class weights rescale each term and the mean
// becomes weight-normalized.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     const std::vector<double>& class_weights = {});

Tensor sum(const Tensor& a);        // total, as a single-element tensor
Tensor mean_rows(const Tensor& a);  // m-by-n -> 1-by-n column means

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, size_t begin, size_t end);
// Single element by flat index, as a 1-element tensor (gradient flows).
Tensor select(const Tensor& a, size_t flat_index);

}  // namespace gdla
