#include "gdla/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <sstream>
#include <unordered_map>

namespace gdla {

namespace {

using Vec = std::vector<double>;

// ---------------------------------------------------------------------------
// Tape: the dynamic graph. One instance per thread; operations append nodes
// as they execute, so node ids are already topologically ordered and the
// backward pass is a single reverse sweep.

class Tape;
Tape& active_tape();
thread_local bool g_grad_mode = true;

class Tape {
 public:
  struct Node {
    std::vector<size_t> shape;
    // Accumulates input gradients from the gradient of this node's output.
    // Null for leaves. Closures work on raw buffers and must not invoke
    // tensor operations (that would append to the tape mid-sweep).
    std::function<void(const Vec& grad_out, Tape& tape)> backprop;
  };

  uint64_t graph_id() const { return graph_id_; }

  void reset() {
    nodes_.clear();
    grads_.clear();
    leaves_.clear();
    keep_alive_.clear();
    ++graph_id_;
  }

  int add_node(std::vector<size_t> shape,
               std::function<void(const Vec&, Tape&)> backprop) {
    nodes_.push_back(Node{std::move(shape), std::move(backprop)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // One leaf per distinct storage buffer. The shared_ptr is retained so the
  // address cannot be recycled while this graph is alive.
  int leaf_for(const std::shared_ptr<const Vec>& data,
               const std::vector<size_t>& shape) {
    auto it = leaves_.find(data.get());
    if (it != leaves_.end()) return it->second;
    int id = add_node(shape, nullptr);
    leaves_.emplace(data.get(), id);
    keep_alive_.push_back(data);
    return id;
  }

  int find_leaf(const void* data) const {
    auto it = leaves_.find(data);
    return it == leaves_.end() ? -1 : it->second;
  }

  void accumulate(int node, const Vec& g) {
    Vec& slot = grads_[static_cast<size_t>(node)];
    if (slot.empty()) {
      slot = g;
      return;
    }
    for (size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }

  void accumulate(int node, Vec&& g) {
    Vec& slot = grads_[static_cast<size_t>(node)];
    if (slot.empty()) {
      slot = std::move(g);
      return;
    }
    for (size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
  }

  void run_backward(int root) {
    grads_.assign(nodes_.size(), Vec());
    size_t n = nodes_[static_cast<size_t>(root)].shape.empty()
                   ? 1
                   : [&] {
                       size_t total = 1;
                       for (size_t e : nodes_[static_cast<size_t>(root)].shape)
                         total *= e;
                       return total;
                     }();
    grads_[static_cast<size_t>(root)] = Vec(n, 1.0);
    for (int i = root; i >= 0; --i) {
      const Node& node = nodes_[static_cast<size_t>(i)];
      const Vec& g = grads_[static_cast<size_t>(i)];
      if (!g.empty() && node.backprop) node.backprop(g, *this);
    }
  }

  const Vec* grad_of(int node) const {
    if (node < 0 || static_cast<size_t>(node) >= grads_.size()) return nullptr;
    const Vec& g = grads_[static_cast<size_t>(node)];
    return g.empty() ? nullptr : &g;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<Vec> grads_;
  std::unordered_map<const void*, int> leaves_;
  std::vector<std::shared_ptr<const Vec>> keep_alive_;
  uint64_t graph_id_ = 1;
};

Tape& active_tape() {
  thread_local Tape tape;
  return tape;
}

void check_finite(const Vec& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(op) + ": non-finite value in result");
    }
  }
}

}  // namespace

namespace detail {

struct TapeAccess {
  static int input_node(Tape& tape, const Tensor& t) {
    if (!g_grad_mode || !t.data_) return -1;
    if (t.graph_id_ == tape.graph_id() && t.node_ >= 0) return t.node_;
    if (t.grad_enabled_) return tape.leaf_for(t.data_, t.shape_);
    return -1;
  }

  static void mark_output(Tape& tape, Tensor& t, int node) {
    t.node_ = node;
    t.graph_id_ = tape.graph_id();
  }

  static int current_node(const Tensor& t) {
    Tape& tape = active_tape();
    if (t.graph_id_ == tape.graph_id() && t.node_ >= 0) return t.node_;
    if (t.grad_enabled_ && t.data_) return tape.find_leaf(t.data_.get());
    return -1;
  }

  static const std::shared_ptr<const Vec>& data(const Tensor& t) {
    return t.data_;
  }
};

}  // namespace detail

using detail::TapeAccess;

// ---------------------------------------------------------------------------
// Tensor basics

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> values,
               bool grad_enabled)
    : shape_(std::move(shape)), grad_enabled_(grad_enabled) {
  size_t expected = 1;
  for (size_t e : shape_) {
    if (e == 0) throw ContractError("Tensor: zero extent in shape " + shape_str());
    expected *= e;
  }
  if (shape_.empty() || expected != values.size()) {
    std::ostringstream os;
    os << "Tensor: shape " << shape_str() << " does not match " << values.size()
       << " values";
    throw ContractError(os.str());
  }
  check_finite(values, "Tensor");
  data_ = std::make_shared<const Vec>(std::move(values));
}

Tensor Tensor::zeros(std::vector<size_t> shape) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  return Tensor(std::move(shape), Vec(n, 0.0));
}

Tensor Tensor::full(std::vector<size_t> shape, double value) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  return Tensor(std::move(shape), Vec(n, value));
}

Tensor Tensor::identity(size_t n) {
  Vec v(n * n, 0.0);
  for (size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ContractError("Tensor::from_rows: no rows");
  size_t n = rows[0].size();
  Vec flat;
  flat.reserve(rows.size() * n);
  for (const auto& r : rows) {
    if (r.size() != n)
      throw ContractError("Tensor::from_rows: ragged rows");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), n}, std::move(flat));
}

Tensor Tensor::random_uniform(std::vector<size_t> shape, double lo, double hi,
                              Rng& rng) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  Vec v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

size_t Tensor::size() const { return data_ ? data_->size() : 0; }

size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() == 2) return shape_[0];
  throw ContractError("Tensor::rows: rank " + std::to_string(shape_.size()) +
                      " tensor has no matrix view");
}

size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() == 2) return shape_[1];
  throw ContractError("Tensor::cols: rank " + std::to_string(shape_.size()) +
                      " tensor has no matrix view");
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << 'x';
    os << shape_[i];
  }
  return os.str();
}

const std::vector<double>& Tensor::values() const& {
  if (!data_) throw ContractError("Tensor: undefined tensor");
  return *data_;
}

std::vector<double> Tensor::values() && {
  if (!data_) throw ContractError("Tensor: undefined tensor");
  return *data_;
}

double Tensor::at(size_t flat) const {
  const Vec& v = values();
  if (flat >= v.size())
    throw IndexError("Tensor::at: index " + std::to_string(flat) +
                     " out of range for " + std::to_string(v.size()) +
                     " elements");
  return v[flat];
}

double Tensor::at(size_t row, size_t col) const {
  return at(row * cols() + col);
}

double Tensor::scalar_value() const {
  if (size() != 1)
    throw ContractError("Tensor::scalar_value: shape " + shape_str() +
                        " is not a scalar");
  return values()[0];
}

// ---------------------------------------------------------------------------
// Autograd control

void new_graph() { active_tape().reset(); }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

namespace detail {

// Shared in params.cpp to map parameters to their gradients.
const std::vector<double>* leaf_gradient(const Tensor& t) {
  Tape& tape = active_tape();
  if (!TapeAccess::data(t)) return nullptr;
  int leaf = tape.find_leaf(TapeAccess::data(t).get());
  return tape.grad_of(leaf);
}

bool run_backward_from(const Tensor& loss) {
  int root = TapeAccess::current_node(loss);
  if (root < 0) return false;
  active_tape().run_backward(root);
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Op plumbing

namespace {

Tensor make_result(const char* op, std::vector<size_t> shape, Vec values) {
  check_finite(values, op);
  return Tensor(std::move(shape), std::move(values));
}

// Records a node when any input participates; na/nb are leaf/op node ids or
// -1 for constants.
void record(Tensor& result, int na, int nb,
            std::function<void(const Vec&, Tape&)> backprop) {
  if (na < 0 && nb < 0) return;
  Tape& tape = active_tape();
  int node = tape.add_node(result.shape(), std::move(backprop));
  TapeAccess::mark_output(tape, result, node);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Operations

Tensor matmul(const Tensor& a, const Tensor& b) {
  size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions disagree, lhs " +
                         a.shape_str() + ", rhs " + b.shape_str());
  }
  const Vec& av = a.values();
  const Vec& bv = b.values();
  Vec out(m * n, 0.0);
  for (size_t i = 0; i < m; ++i) {
    for (size_t kk = 0; kk < k; ++kk) {
      double aik = av[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + kk * n;
      double* orow = out.data() + i * n;
      for (size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  Tensor result = make_result("matmul", {m, n}, std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  int nb = TapeAccess::input_node(tape, b);
  auto adata = TapeAccess::data(a);
  auto bdata = TapeAccess::data(b);
  record(result, na, nb, [=](const Vec& g, Tape& t) {
    if (na >= 0) {  // dA = g . B^T
      Vec da(m * k, 0.0);
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
          double gij = g[i * n + j];
          if (gij == 0.0) continue;
          for (size_t kk = 0; kk < k; ++kk)
            da[i * k + kk] += gij * (*bdata)[kk * n + j];
        }
      t.accumulate(na, std::move(da));
    }
    if (nb >= 0) {  // dB = A^T . g
      Vec db(k * n, 0.0);
      for (size_t i = 0; i < m; ++i)
        for (size_t kk = 0; kk < k; ++kk) {
          double aik = (*adata)[i * k + kk];
          if (aik == 0.0) continue;
          for (size_t j = 0; j < n; ++j)
            db[kk * n + j] += aik * g[i * n + j];
        }
      t.accumulate(nb, std::move(db));
    }
  });
  return result;
}

Tensor transpose(const Tensor& a) {
  size_t m = a.rows(), n = a.cols();
  const Vec& av = a.values();
  Vec out(n * m);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  Tensor result = make_result("transpose", {n, m}, std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  record(result, na, -1, [=](const Vec& g, Tape& t) {
    Vec da(m * n);
    for (size_t j = 0; j < n; ++j)
      for (size_t i = 0; i < m; ++i) da[i * n + j] = g[j * m + i];
    t.accumulate(na, std::move(da));
  });
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const Vec& av = a.values();
  const Vec& bv = b.values();
  Vec out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Tensor result = make_result("add", a.shape(), std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  int nb = TapeAccess::input_node(tape, b);
  record(result, na, nb, [=](const Vec& g, Tape& t) {
    if (na >= 0) t.accumulate(na, g);
    if (nb >= 0) t.accumulate(nb, g);
  });
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const Vec& av = a.values();
  const Vec& bv = b.values();
  Vec out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tensor result = make_result("sub", a.shape(), std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  int nb = TapeAccess::input_node(tape, b);
  record(result, na, nb, [=](const Vec& g, Tape& t) {
    if (na >= 0) t.accumulate(na, g);
    if (nb >= 0) {
      Vec db(g.size());
      for (size_t i = 0; i < g.size(); ++i) db[i] = -g[i];
      t.accumulate(nb, std::move(db));
    }
  });
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const Vec& av = a.values();
  const Vec& bv = b.values();
  Vec out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor result = make_result("mul", a.shape(), std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  int nb = TapeAccess::input_node(tape, b);
  auto adata = TapeAccess::data(a);
  auto bdata = TapeAccess::data(b);
  record(result, na, nb, [=](const Vec& g, Tape& t) {
    if (na >= 0) {
      Vec da(g.size());
      for (size_t i = 0; i < g.size(); ++i) da[i] = g[i] * (*bdata)[i];
      t.accumulate(na, std::move(da));
    }
    if (nb >= 0) {
      Vec db(g.size());
      for (size_t i = 0; i < g.size(); ++i) db[i] = g[i] * (*adata)[i];
      t.accumulate(nb, std::move(db));
    }
  });
  return result;
}

Tensor divide(const Tensor& a, const Tensor& b) {
  require_same_shape("divide", a, b);
  const Vec& av = a.values();
  const Vec& bv = b.values();
  Vec out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  Tensor result = make_result("divide", a.shape(), std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  int nb = TapeAccess::input_node(tape, b);
  auto adata = TapeAccess::data(a);
  auto bdata = TapeAccess::data(b);
  record(result, na, nb, [=](const Vec& g, Tape& t) {
    if (na >= 0) {
      Vec da(g.size());
      for (size_t i = 0; i < g.size(); ++i) da[i] = g[i] / (*bdata)[i];
      t.accumulate(na, std::move(da));
    }
    if (nb >= 0) {
      Vec db(g.size());
      for (size_t i = 0; i < g.size(); ++i) {
        double bi = (*bdata)[i];
        db[i] = -g[i] * (*adata)[i] / (bi * bi);
      }
      t.accumulate(nb, std::move(db));
    }
  });
  return result;
}

Tensor scale(const Tensor& a, double c) {
  const Vec& av = a.values();
  Vec out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  Tensor result = make_result("scale", a.shape(), std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  record(result, na, -1, [=](const Vec& g, Tape& t) {
    Vec da(g.size());
    for (size_t i = 0; i < g.size(); ++i) da[i] = g[i] * c;
    t.accumulate(na, std::move(da));
  });
  return result;
}

Tensor add_rowvec(const Tensor& m, const Tensor& row) {
  size_t r = m.rows(), n = m.cols();
  if (row.size() != n) {
    throw DimensionError("add_rowvec: matrix " + m.shape_str() +
                         " vs row vector " + row.shape_str());
  }
  const Vec& mv = m.values();
  const Vec& rv = row.values();
  Vec out(mv.size());
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < n; ++j) out[i * n + j] = mv[i * n + j] + rv[j];
  Tensor result = make_result("add_rowvec", m.shape(), std::move(out));

  Tape& tape = active_tape();
  int nm = TapeAccess::input_node(tape, m);
  int nr = TapeAccess::input_node(tape, row);
  record(result, nm, nr, [=](const Vec& g, Tape& t) {
    if (nm >= 0) t.accumulate(nm, g);
    if (nr >= 0) {
      Vec dr(n, 0.0);
      for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < n; ++j) dr[j] += g[i * n + j];
      t.accumulate(nr, std::move(dr));
    }
  });
  return result;
}

Tensor scale_by(const Tensor& m, const Tensor& scalar) {
  if (scalar.size() != 1) {
    throw DimensionError("scale_by: scale factor has shape " +
                         scalar.shape_str() + ", expected a single element");
  }
  double s = scalar.values()[0];
  const Vec& mv = m.values();
  Vec out(mv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = mv[i] * s;
  Tensor result = make_result("scale_by", m.shape(), std::move(out));

  Tape& tape = active_tape();
  int nm = TapeAccess::input_node(tape, m);
  int ns = TapeAccess::input_node(tape, scalar);
  auto mdata = TapeAccess::data(m);
  record(result, nm, ns, [=](const Vec& g, Tape& t) {
    if (nm >= 0) {
      Vec dm(g.size());
      for (size_t i = 0; i < g.size(); ++i) dm[i] = g[i] * s;
      t.accumulate(nm, std::move(dm));
    }
    if (ns >= 0) {
      double ds = 0.0;
      for (size_t i = 0; i < g.size(); ++i) ds += g[i] * (*mdata)[i];
      t.accumulate(ns, Vec{ds});
    }
  });
  return result;
}

Tensor relu(const Tensor& a) {
  const Vec& av = a.values();
  Vec out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  Tensor result = make_result("relu", a.shape(), std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  auto adata = TapeAccess::data(a);
  record(result, na, -1, [=](const Vec& g, Tape& t) {
    Vec da(g.size());
    for (size_t i = 0; i < g.size(); ++i)
      da[i] = (*adata)[i] > 0.0 ? g[i] : 0.0;
    t.accumulate(na, std::move(da));
  });
  return result;
}

Tensor sigmoid(const Tensor& a) {
  const Vec& av = a.values();
  Vec out(av.size());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = av[i];
    // Branch on sign so the exponential never overflows.
    if (x >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      double e = std::exp(x);
      out[i] = e / (1.0 + e);
    }
  }
  Tensor result = make_result("sigmoid", a.shape(), std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  auto ydata = TapeAccess::data(result);
  record(result, na, -1, [=](const Vec& g, Tape& t) {
    Vec da(g.size());
    for (size_t i = 0; i < g.size(); ++i) {
      double y = (*ydata)[i];
      da[i] = g[i] * y * (1.0 - y);
    }
    t.accumulate(na, std::move(da));
  });
  return result;
}

Tensor softmax_rows(const Tensor& x) {
  size_t m = x.rows(), n = x.cols();
  const Vec& xv = x.values();
  Vec out(m * n);
  for (size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mx = row[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (size_t j = 0; j < n; ++j) {
      double e = std::exp(row[j] - mx);
      out[i * n + j] = e;
      total += e;
    }
    for (size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  Tensor result = make_result("softmax_rows", {m, n}, std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, x);
  auto ydata = TapeAccess::data(result);
  record(result, na, -1, [=](const Vec& g, Tape& t) {
    Vec dx(m * n);
    for (size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (size_t j = 0; j < n; ++j)
        dot += g[i * n + j] * (*ydata)[i * n + j];
      for (size_t j = 0; j < n; ++j) {
        double y = (*ydata)[i * n + j];
        dx[i * n + j] = y * (g[i * n + j] - dot);
      }
    }
    t.accumulate(na, std::move(dx));
  });
  return result;
}

Tensor row_l2_norms(const Tensor& x, double eps) {
  if (eps <= 0.0) throw ContractError("row_l2_norms: eps must be positive");
  size_t m = x.rows(), n = x.cols();
  const Vec& xv = x.values();
  Vec out(m);
  for (size_t i = 0; i < m; ++i) {
    double sq = 0.0;
    for (size_t j = 0; j < n; ++j) {
      double v = xv[i * n + j];
      sq += v * v;
    }
    out[i] = std::max(std::sqrt(sq), eps);
  }
  Tensor result = make_result("row_l2_norms", {m, 1}, std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, x);
  auto xdata = TapeAccess::data(x);
  auto ndata = TapeAccess::data(result);
  record(result, na, -1, [=](const Vec& g, Tape& t) {
    Vec dx(m * n, 0.0);
    for (size_t i = 0; i < m; ++i) {
      double norm = (*ndata)[i];
      // Zero gradient where the eps floor is active: the output is
      // locally constant there.
      double sq = 0.0;
      for (size_t j = 0; j < n; ++j) {
        double v = (*xdata)[i * n + j];
        sq += v * v;
      }
      if (std::sqrt(sq) <= eps) continue;
      for (size_t j = 0; j < n; ++j)
        dx[i * n + j] = g[i] * (*xdata)[i * n + j] / norm;
    }
    t.accumulate(na, std::move(dx));
  });
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  size_t m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: matrix " + x.shape_str() + " vs gain " +
                         gain.shape_str() + " / bias " + bias.shape_str());
  }
  const Vec& xv = x.values();
  const Vec& gv = gain.values();
  const Vec& bv = bias.values();

  // Cache the normalized rows and inverse deviations for the backward pass.
  auto xhat = std::make_shared<Vec>(m * n);
  auto inv_dev = std::make_shared<Vec>(m);
  Vec out(m * n);
  for (size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mean = 0.0;
    for (size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (size_t j = 0; j < n; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_dev)[i] = inv;
    for (size_t j = 0; j < n; ++j) {
      double h = (row[j] - mean) * inv;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = gv[j] * h + bv[j];
    }
  }
  Tensor result = make_result("layer_norm", {m, n}, std::move(out));

  Tape& tape = active_tape();
  int nx = TapeAccess::input_node(tape, x);
  int ng = TapeAccess::input_node(tape, gain);
  int nb = TapeAccess::input_node(tape, bias);
  auto gdata = TapeAccess::data(gain);
  if (nx >= 0 || ng >= 0 || nb >= 0) {
    int node = tape.add_node({m, n}, [=](const Vec& g, Tape& t) {
      if (ng >= 0) {
        Vec dgain(n, 0.0);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j)
            dgain[j] += g[i * n + j] * (*xhat)[i * n + j];
        t.accumulate(ng, std::move(dgain));
      }
      if (nb >= 0) {
        Vec dbias(n, 0.0);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j) dbias[j] += g[i * n + j];
        t.accumulate(nb, std::move(dbias));
      }
      if (nx >= 0) {
        Vec dx(m * n);
        for (size_t i = 0; i < m; ++i) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (size_t j = 0; j < n; ++j) {
            double dh = g[i * n + j] * (*gdata)[j];
            mean_dh += dh;
            mean_dh_h += dh * (*xhat)[i * n + j];
          }
          mean_dh /= static_cast<double>(n);
          mean_dh_h /= static_cast<double>(n);
          for (size_t j = 0; j < n; ++j) {
            double dh = g[i * n + j] * (*gdata)[j];
            dx[i * n + j] = (*inv_dev)[i] *
                            (dh - mean_dh - (*xhat)[i * n + j] * mean_dh_h);
          }
        }
        t.accumulate(nx, std::move(dx));
      }
    });
    TapeAccess::mark_output(tape, result, node);
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     const std::vector<double>& class_weights) {
  size_t b = logits.rows(), c = logits.cols();
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(b) +
                         " logit rows vs " + std::to_string(labels.size()) +
                         " labels");
  }
  if (!class_weights.empty() && class_weights.size() != c) {
    throw DimensionError("cross_entropy: " + std::to_string(c) +
                         " classes vs " + std::to_string(class_weights.size()) +
                         " class weights");
  }
  for (size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<size_t>(labels[i]) >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) +
                       " at batch position " + std::to_string(i) +
                       " outside [0, " + std::to_string(c) + ")");
    }
  }

  const Vec& lv = logits.values();
  auto probs = std::make_shared<Vec>(b * c);
  auto weights = std::make_shared<Vec>(b, 1.0);
  double weight_total = 0.0;
  double loss = 0.0;
  for (size_t i = 0; i < b; ++i) {
    const double* row = lv.data() + i * c;
    double mx = row[0];
    for (size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    double lse = mx + std::log(total);
    for (size_t j = 0; j < c; ++j)
      (*probs)[i * c + j] = std::exp(row[j] - lse);
    double w = class_weights.empty()
                   ? 1.0
                   : class_weights[static_cast<size_t>(labels[i])];
    (*weights)[i] = w;
    weight_total += w;
    loss += w * (lse - row[static_cast<size_t>(labels[i])]);
  }
  if (weight_total <= 0.0)
    throw ContractError("cross_entropy: class weights sum to zero over batch");
  loss /= weight_total;
  Tensor result = make_result("cross_entropy", {1}, Vec{loss});

  Tape& tape = active_tape();
  int nl = TapeAccess::input_node(tape, logits);
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  record(result, nl, -1, [=](const Vec& g, Tape& t) {
    Vec dl(b * c);
    for (size_t i = 0; i < b; ++i) {
      double w = (*weights)[i] / weight_total;
      for (size_t j = 0; j < c; ++j) {
        double p = (*probs)[i * c + j];
        double onehot =
            (static_cast<size_t>((*labels_copy)[i]) == j) ? 1.0 : 0.0;
        dl[i * c + j] = g[0] * w * (p - onehot);
      }
    }
    t.accumulate(nl, std::move(dl));
  });
  return result;
}

Tensor sum(const Tensor& a) {
  const Vec& av = a.values();
  double total = 0.0;
  for (double v : av) total += v;
  Tensor result = make_result("sum", {1}, Vec{total});

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  size_t n = av.size();
  record(result, na, -1, [=](const Vec& g, Tape& t) {
    t.accumulate(na, Vec(n, g[0]));
  });
  return result;
}

Tensor mean_rows(const Tensor& a) {
  size_t m = a.rows(), n = a.cols();
  const Vec& av = a.values();
  Vec out(n, 0.0);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
  for (size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
  Tensor result = make_result("mean_rows", {1, n}, std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  record(result, na, -1, [=](const Vec& g, Tape& t) {
    Vec da(m * n);
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j)
        da[i * n + j] = g[j] / static_cast<double>(m);
    t.accumulate(na, std::move(da));
  });
  return result;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  size_t m = parts[0].rows();
  size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row mismatch, " +
                           parts[0].shape_str() + " vs " + p.shape_str());
    }
    total += p.cols();
  }
  Vec out(m * total);
  size_t offset = 0;
  for (const Tensor& p : parts) {
    size_t n = p.cols();
    const Vec& pv = p.values();
    for (size_t i = 0; i < m; ++i)
      std::memcpy(out.data() + i * total + offset, pv.data() + i * n,
                  n * sizeof(double));
    offset += n;
  }
  Tensor result = make_result("concat_cols", {m, total}, std::move(out));

  Tape& tape = active_tape();
  std::vector<int> nodes(parts.size());
  std::vector<size_t> widths(parts.size());
  bool any = false;
  for (size_t p = 0; p < parts.size(); ++p) {
    nodes[p] = TapeAccess::input_node(tape, parts[p]);
    widths[p] = parts[p].cols();
    any = any || nodes[p] >= 0;
  }
  if (any) {
    int node = tape.add_node({m, total}, [=](const Vec& g, Tape& t) {
      size_t off = 0;
      for (size_t p = 0; p < nodes.size(); ++p) {
        size_t n = widths[p];
        if (nodes[p] >= 0) {
          Vec dp(m * n);
          for (size_t i = 0; i < m; ++i)
            std::memcpy(dp.data() + i * n, g.data() + i * total + off,
                        n * sizeof(double));
          t.accumulate(nodes[p], std::move(dp));
        }
        off += n;
      }
    });
    TapeAccess::mark_output(tape, result, node);
  }
  return result;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  size_t n = parts[0].cols();
  size_t total_rows = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column mismatch, " +
                           parts[0].shape_str() + " vs " + p.shape_str());
    }
    total_rows += p.rows();
  }
  Vec out;
  out.reserve(total_rows * n);
  for (const Tensor& p : parts) {
    const Vec& pv = p.values();
    out.insert(out.end(), pv.begin(), pv.end());
  }
  Tensor result = make_result("concat_rows", {total_rows, n}, std::move(out));

  Tape& tape = active_tape();
  std::vector<int> nodes(parts.size());
  std::vector<size_t> heights(parts.size());
  bool any = false;
  for (size_t p = 0; p < parts.size(); ++p) {
    nodes[p] = TapeAccess::input_node(tape, parts[p]);
    heights[p] = parts[p].rows();
    any = any || nodes[p] >= 0;
  }
  if (any) {
    int node = tape.add_node({total_rows, n}, [=](const Vec& g, Tape& t) {
      size_t row = 0;
      for (size_t p = 0; p < nodes.size(); ++p) {
        size_t h = heights[p];
        if (nodes[p] >= 0) {
          Vec dp(g.begin() + static_cast<long>(row * n),
                 g.begin() + static_cast<long>((row + h) * n));
          t.accumulate(nodes[p], std::move(dp));
        }
        row += h;
      }
    });
    TapeAccess::mark_output(tape, result, node);
  }
  return result;
}

Tensor slice_cols(const Tensor& a, size_t begin, size_t end) {
  size_t m = a.rows(), n = a.cols();
  if (begin >= end || end > n) {
    throw IndexError("slice_cols: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for " + a.shape_str());
  }
  size_t w = end - begin;
  const Vec& av = a.values();
  Vec out(m * w);
  for (size_t i = 0; i < m; ++i)
    std::memcpy(out.data() + i * w, av.data() + i * n + begin,
                w * sizeof(double));
  Tensor result = make_result("slice_cols", {m, w}, std::move(out));

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  record(result, na, -1, [=](const Vec& g, Tape& t) {
    Vec da(m * n, 0.0);
    for (size_t i = 0; i < m; ++i)
      std::memcpy(da.data() + i * n + begin, g.data() + i * w,
                  w * sizeof(double));
    t.accumulate(na, std::move(da));
  });
  return result;
}

Tensor select(const Tensor& a, size_t flat_index) {
  const Vec& av = a.values();
  if (flat_index >= av.size()) {
    throw IndexError("select: index " + std::to_string(flat_index) +
                     " out of range for " + a.shape_str());
  }
  Tensor result = make_result("select", {1}, Vec{av[flat_index]});

  Tape& tape = active_tape();
  int na = TapeAccess::input_node(tape, a);
  size_t n = av.size();
  record(result, na, -1, [=](const Vec& g, Tape& t) {
    Vec da(n, 0.0);
    da[flat_index] = g[0];
    t.accumulate(na, std::move(da));
  });
  return result;
}

}  // namespace gdla
