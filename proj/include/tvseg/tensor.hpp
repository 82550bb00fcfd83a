// Dense 64-bit tensors on a per-graph tape with reverse-mode differentiation.
// A Graph owns all node storage; Tensor is a cheap handle into one graph.
// Graphs are thread-confined from construction through backward.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tvseg {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline void expect_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

/// Deterministic RNG. mt19937_64 output is pinned by the standard and the
/// uniform mapping below avoids the implementation-defined distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  std::uint64_t next() { return eng_(); }
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int n) {  // in [0, n)
    int v = static_cast<int>(uniform() * n);
    return v >= n ? n - 1 : v;
  }

 private:
  std::mt19937_64 eng_;
};

class Graph;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // sized by Graph::backward for grad-requiring nodes
  std::vector<int> inputs;
  std::function<void(Graph&, int)> back;  // null for leaves
  bool requires_grad = false;
};

// c[m,n] += a[m,k] * b[k,n]
inline void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::int64_t>(i) * k;
    double* ci = c + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
inline void mm_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::int64_t>(i) * k;
    double* ci = c + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<std::int64_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
inline void mm_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::int64_t>(i) * k;
    const double* bi = b + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace detail

struct GraphDiagnostics {
  std::int64_t zero_norm_cosine = 0;
};

class Tensor {
 public:
  Tensor() = default;

  bool valid() const { return g_ != nullptr; }
  Graph* graph() const { return g_; }
  int id() const { return id_; }

  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int i) const { return shape()[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return numel(shape()); }

  const std::vector<double>& value() const;
  const std::vector<double>& grad() const;
  double scalar() const;

 private:
  friend class Graph;
  Tensor(Graph* g, int id) : g_(g), id_(id) {}
  Graph* g_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor leaf(Shape shape, std::span<const double> data, bool requires_grad) {
    expect_shape(numel(shape) == static_cast<std::int64_t>(data.size()),
                 "leaf: shape " + shape_str(shape) + " does not match data length " +
                     std::to_string(data.size()));
    detail::Node n;
    n.shape = std::move(shape);
    n.val.assign(data.begin(), data.end());
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
  }

  Tensor constant(Shape shape, std::span<const double> data) {
    return leaf(std::move(shape), data, false);
  }

  Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> d(static_cast<std::size_t>(numel(shape)), v);
    return leaf(std::move(shape), d, requires_grad);
  }

  Tensor scalar(double v) { return full({1}, v); }

  /// Internal: append an op node. `fill` writes the output values.
  Tensor make(Shape shape, std::vector<int> inputs, std::function<void(Graph&, int)> back) {
    detail::Node n;
    n.shape = std::move(shape);
    n.val.assign(static_cast<std::size_t>(numel(n.shape)), 0.0);
    n.inputs = std::move(inputs);
    for (int i : n.inputs) n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(i)].requires_grad;
    if (n.requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
  }

  detail::Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const detail::Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  int node_count() const { return static_cast<int>(nodes_.size()); }

  /// Reverse accumulation from a scalar seed. Grad-requiring leaves that the
  /// seed does not reach end up with exactly zero gradients.
  void backward(const Tensor& seed) {
    if (seed.graph() != this) throw UsageError("backward: seed tensor does not belong to this graph");
    if (seed.size() != 1) throw UsageError("backward: seed must be a scalar, got shape " + shape_str(seed.shape()));
    if (backward_done_) throw UsageError("backward: graph already differentiated");
    backward_done_ = true;
    for (auto& n : nodes_)
      if (n.requires_grad) n.grad.assign(n.val.size(), 0.0);
    detail::Node& s = nodes_[static_cast<std::size_t>(seed.id())];
    if (!s.requires_grad) return;
    s.grad[0] = 1.0;
    for (int i = seed.id(); i >= 0; --i) {
      detail::Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad && n.back) n.back(*this, i);
    }
  }

  GraphDiagnostics diagnostics;

 private:
  std::vector<detail::Node> nodes_;
  bool backward_done_ = false;
};

inline const Shape& Tensor::shape() const {
  if (!g_) throw UsageError("use of empty tensor handle");
  return g_->node(id_).shape;
}
inline const std::vector<double>& Tensor::value() const {
  if (!g_) throw UsageError("use of empty tensor handle");
  return g_->node(id_).val;
}
inline const std::vector<double>& Tensor::grad() const {
  if (!g_) throw UsageError("use of empty tensor handle");
  return g_->node(id_).grad;
}
inline double Tensor::scalar() const {
  if (size() != 1) throw UsageError("scalar() on tensor of shape " + shape_str(shape()));
  return value()[0];
}

namespace detail {
inline Graph& same_graph(const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid()) throw UsageError("operation on empty tensor handle");
  if (a.graph() != b.graph()) throw UsageError("operands belong to different graphs");
  return *a.graph();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Graph& g = detail::same_graph(a, b);
  expect_shape(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
               "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const int ai = a.id(), bi = b.id();
  Tensor out = g.make({m, n}, {ai, bi}, [ai, bi, m, k, n](Graph& gr, int self) {
    const auto& dc = gr.node(self).grad;
    auto& na = gr.node(ai);
    auto& nb = gr.node(bi);
    if (na.requires_grad) detail::mm_nt_acc(dc.data(), nb.val.data(), na.grad.data(), m, n, k);
    if (nb.requires_grad) detail::mm_tn_acc(na.val.data(), dc.data(), nb.grad.data(), m, k, n);
  });
  detail::mm_acc(a.value().data(), b.value().data(), g.node(out.id()).val.data(), m, k, n);
  return out;
}

inline Tensor transpose2d(const Tensor& a) {
  Graph& g = *a.graph();
  expect_shape(a.rank() == 2, "transpose2d: expected rank-2 tensor, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  const int ai = a.id();
  Tensor out = g.make({n, m}, {ai}, [ai, m, n](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    auto& da = gr.node(ai).grad;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) da[static_cast<std::size_t>(i) * n + j] += dy[static_cast<std::size_t>(j) * m + i];
  });
  auto& y = g.node(out.id()).val;
  const auto& x = a.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y[static_cast<std::size_t>(j) * m + i] = x[static_cast<std::size_t>(i) * n + j];
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  Graph& g = *a.graph();
  expect_shape(numel(shape) == a.size(),
               "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  const int ai = a.id();
  Tensor out = g.make(std::move(shape), {ai}, [ai](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    auto& da = gr.node(ai).grad;
    for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
  });
  g.node(out.id()).val = a.value();
  return out;
}

/// Contiguous sub-range along one axis.
inline Tensor slice(const Tensor& a, int axis, int start, int len) {
  Graph& g = *a.graph();
  expect_shape(axis >= 0 && axis < a.rank(), "slice: axis out of range for " + shape_str(a.shape()));
  expect_shape(start >= 0 && len >= 1 && start + len <= a.dim(axis),
               "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                   ") invalid for axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  Shape os = a.shape();
  os[static_cast<std::size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::int64_t in_stride = static_cast<std::int64_t>(a.dim(axis)) * inner;
  const std::int64_t out_stride = static_cast<std::int64_t>(len) * inner;
  const std::int64_t off = start * inner;
  const int ai = a.id();
  Tensor out = g.make(std::move(os), {ai}, [ai, outer, inner, in_stride, out_stride, off, len](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    auto& da = gr.node(ai).grad;
    for (std::int64_t o = 0; o < outer; ++o) {
      const double* src = dy.data() + o * out_stride;
      double* dst = da.data() + o * in_stride + off;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(len) * inner; ++i) dst[i] += src[i];
    }
  });
  auto& y = g.node(out.id()).val;
  const auto& x = a.value();
  for (std::int64_t o = 0; o < outer; ++o) {
    const double* src = x.data() + o * in_stride + off;
    double* dst = y.data() + o * out_stride;
    std::copy(src, src + static_cast<std::int64_t>(len) * inner, dst);
  }
  return out;
}

inline Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  Graph& g = *parts[0].graph();
  const int rank = parts[0].rank();
  expect_shape(axis >= 0 && axis < rank, "concat: axis out of range");
  Shape os = parts[0].shape();
  int total = 0;
  for (const Tensor& p : parts) {
    detail::same_graph(parts[0], p);
    expect_shape(p.rank() == rank, "concat: rank mismatch " + shape_str(p.shape()));
    for (int i = 0; i < rank; ++i)
      if (i != axis)
        expect_shape(p.dim(i) == os[static_cast<std::size_t>(i)],
                     "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    total += p.dim(axis);
  }
  os[static_cast<std::size_t>(axis)] = total;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= os[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= os[static_cast<std::size_t>(i)];
  std::vector<int> ids;
  std::vector<int> lens;
  for (const Tensor& p : parts) {
    ids.push_back(p.id());
    lens.push_back(p.dim(axis));
  }
  const std::int64_t out_stride = static_cast<std::int64_t>(total) * inner;
  Tensor out = g.make(os, ids, [ids, lens, outer, inner, out_stride](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    std::int64_t off = 0;
    for (std::size_t pi = 0; pi < ids.size(); ++pi) {
      auto& np = gr.node(ids[pi]);
      const std::int64_t part = static_cast<std::int64_t>(lens[pi]) * inner;
      if (np.requires_grad) {
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* src = dy.data() + o * out_stride + off;
          double* dst = np.grad.data() + o * part;
          for (std::int64_t i = 0; i < part; ++i) dst[i] += src[i];
        }
      }
      off += part;
    }
  });
  auto& y = g.node(out.id()).val;
  std::int64_t off = 0;
  for (std::size_t pi = 0; pi < ids.size(); ++pi) {
    const auto& x = g.node(ids[pi]).val;
    const std::int64_t part = static_cast<std::int64_t>(lens[pi]) * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(x.data() + o * part, x.data() + (o + 1) * part, y.data() + o * out_stride + off);
    off += part;
  }
  return out;
}

inline Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  std::vector<Tensor> v(parts);
  return concat(std::span<const Tensor>(v), axis);
}

inline Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
  expect_shape(a.rank() == b.rank() && a.rank() >= 1, "concat_lastdim: rank mismatch");
  return concat({a, b}, a.rank() - 1);
}

/// Stack equally shaped tensors along a new leading axis.
inline Tensor stack0(std::span<const Tensor> parts) {
  if (parts.empty()) throw UsageError("stack0: no inputs");
  std::vector<Tensor> lifted;
  lifted.reserve(parts.size());
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    lifted.push_back(reshape(p, s));
  }
  return concat(std::span<const Tensor>(lifted), 0);
}

inline Tensor stack0(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return stack0(std::span<const Tensor>(v));
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {
template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dfdx_from_xy) {
  Graph& g = *a.graph();
  const int ai = a.id();
  Tensor out = g.make(a.shape(), {ai}, [ai, dfdx_from_xy](Graph& gr, int self) {
    const auto& n = gr.node(self);
    auto& na = gr.node(ai);
    for (std::size_t i = 0; i < n.val.size(); ++i)
      na.grad[i] += n.grad[i] * dfdx_from_xy(na.val[i], n.val[i]);
  });
  auto& y = g.node(out.id()).val;
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return out;
}
}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

/// Trigonometric tangent. Callers keep |x| < pi/2 by clamping upstream.
inline Tensor tangent(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::tan(x); },
      [](double, double y) { return 1.0 + y * y; });
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  Graph& g = detail::same_graph(a, b);
  expect_shape(a.shape() == b.shape(),
               "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int ai = a.id(), bi = b.id();
  Tensor out = g.make(a.shape(), {ai, bi}, [ai, bi](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    auto& na = gr.node(ai);
    auto& nb = gr.node(bi);
    if (na.requires_grad)
      for (std::size_t i = 0; i < dy.size(); ++i) na.grad[i] += dy[i];
    if (nb.requires_grad)
      for (std::size_t i = 0; i < dy.size(); ++i) nb.grad[i] += dy[i];
  });
  auto& y = g.node(out.id()).val;
  const auto& xa = a.value();
  const auto& xb = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xa[i] + xb[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor mul(const Tensor& a, const Tensor& b) {
  Graph& g = detail::same_graph(a, b);
  expect_shape(a.shape() == b.shape(),
               "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int ai = a.id(), bi = b.id();
  Tensor out = g.make(a.shape(), {ai, bi}, [ai, bi](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    auto& na = gr.node(ai);
    auto& nb = gr.node(bi);
    if (na.requires_grad)
      for (std::size_t i = 0; i < dy.size(); ++i) na.grad[i] += dy[i] * nb.val[i];
    if (nb.requires_grad)
      for (std::size_t i = 0; i < dy.size(); ++i) nb.grad[i] += dy[i] * na.val[i];
  });
  auto& y = g.node(out.id()).val;
  const auto& xa = a.value();
  const auto& xb = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xa[i] * xb[i];
  return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }

/// x[N,C] + b[C], broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  Graph& g = detail::same_graph(x, b);
  expect_shape(x.rank() == 2 && b.rank() == 1 && x.dim(1) == b.dim(0),
               "add_rowvec: shapes " + shape_str(x.shape()) + " and " + shape_str(b.shape()));
  const int n = x.dim(0), c = x.dim(1);
  const int xi = x.id(), bi = b.id();
  Tensor out = g.make(x.shape(), {xi, bi}, [xi, bi, n, c](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    auto& nx = gr.node(xi);
    auto& nb = gr.node(bi);
    if (nx.requires_grad)
      for (std::size_t i = 0; i < dy.size(); ++i) nx.grad[i] += dy[i];
    if (nb.requires_grad)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) nb.grad[static_cast<std::size_t>(j)] += dy[static_cast<std::size_t>(i) * c + j];
  });
  auto& y = g.node(out.id()).val;
  const auto& xv = x.value();
  const auto& bv = b.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) y[static_cast<std::size_t>(i) * c + j] = xv[static_cast<std::size_t>(i) * c + j] + bv[static_cast<std::size_t>(j)];
  return out;
}

/// v[C] -> [C,H,W], each channel filled with its scalar.
inline Tensor expand_chw(const Tensor& v, int h, int w) {
  Graph& g = *v.graph();
  expect_shape(v.rank() == 1, "expand_chw: expected vector, got " + shape_str(v.shape()));
  const int c = v.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const int vi = v.id();
  Tensor out = g.make({c, h, w}, {vi}, [vi, c, hw](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    auto& nv = gr.node(vi);
    for (int ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      const double* p = dy.data() + ch * hw;
      for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      nv.grad[static_cast<std::size_t>(ch)] += acc;
    }
  });
  auto& y = g.node(out.id()).val;
  const auto& xv = v.value();
  for (int ch = 0; ch < c; ++ch)
    std::fill(y.begin() + ch * hw, y.begin() + (ch + 1) * hw, xv[static_cast<std::size_t>(ch)]);
  return out;
}

inline Tensor sum_all(const Tensor& a) {
  Graph& g = *a.graph();
  const int ai = a.id();
  Tensor out = g.make({1}, {ai}, [ai](Graph& gr, int self) {
    const double dy = gr.node(self).grad[0];
    auto& da = gr.node(ai).grad;
    for (double& v : da) v += dy;
  });
  double acc = 0.0;
  for (double v : a.value()) acc += v;
  g.node(out.id()).val[0] = acc;
  return out;
}

inline Tensor mean_all(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  return scale(sum_all(a), inv);
}

// ---------------------------------------------------------------------------
// Softmax / layer norm

inline Tensor softmax_lastdim(const Tensor& a) {
  Graph& g = *a.graph();
  expect_shape(a.rank() >= 1 && a.dim(a.rank() - 1) >= 1, "softmax_lastdim: empty last dim");
  const int c = a.dim(a.rank() - 1);
  const std::int64_t rows = a.size() / c;
  const int ai = a.id();
  Tensor out = g.make(a.shape(), {ai}, [ai, rows, c](Graph& gr, int self) {
    const auto& n = gr.node(self);
    auto& da = gr.node(ai).grad;
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = n.val.data() + r * c;
      const double* dy = n.grad.data() + r * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += y[j] * dy[j];
      double* dx = da.data() + r * c;
      for (int j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
  auto& y = g.node(out.id()).val;
  const auto& x = a.value();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * c;
    double* yr = y.data() + r * c;
    double mx = xr[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < c; ++j) yr[j] *= inv;
  }
  return out;
}

/// Last-dim normalization with population variance, then affine.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  Graph& g = detail::same_graph(x, gamma);
  detail::same_graph(x, beta);
  if (eps <= 0.0) throw UsageError("layer_norm: eps must be positive");
  const int c = x.dim(x.rank() - 1);
  expect_shape(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
               "layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                   " do not match feature dim of " + shape_str(x.shape()));
  const std::int64_t rows = x.size() / c;
  const int xi = x.id(), gi = gamma.id(), bi = beta.id();
  // Cache per-row inverse stddev and normalized values for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(x.value().size());
  auto istd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  Tensor out = g.make(x.shape(), {xi, gi, bi}, [xi, gi, bi, rows, c, xhat, istd](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    auto& nx = gr.node(xi);
    auto& ng = gr.node(gi);
    auto& nb = gr.node(bi);
    const auto& gv = ng.val;
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* dyr = dy.data() + r * c;
      const double* xh = xhat->data() + r * c;
      if (ng.requires_grad)
        for (int j = 0; j < c; ++j) ng.grad[static_cast<std::size_t>(j)] += dyr[j] * xh[j];
      if (nb.requires_grad)
        for (int j = 0; j < c; ++j) nb.grad[static_cast<std::size_t>(j)] += dyr[j];
      if (nx.requires_grad) {
        double mean_g = 0.0, mean_gx = 0.0;
        for (int j = 0; j < c; ++j) {
          const double gj = dyr[j] * gv[static_cast<std::size_t>(j)];
          mean_g += gj;
          mean_gx += gj * xh[j];
        }
        mean_g /= c;
        mean_gx /= c;
        double* dx = nx.grad.data() + r * c;
        const double is = (*istd)[static_cast<std::size_t>(r)];
        for (int j = 0; j < c; ++j) {
          const double gj = dyr[j] * gv[static_cast<std::size_t>(j)];
          dx[j] += (gj - mean_g - xh[j] * mean_gx) * is;
        }
      }
    }
  });
  auto& y = g.node(out.id()).val;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += xr[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    (*istd)[static_cast<std::size_t>(r)] = is;
    double* xh = xhat->data() + r * c;
    double* yr = y.data() + r * c;
    for (int j = 0; j < c; ++j) {
      xh[j] = (xr[j] - mean) * is;
      yr[j] = gv[static_cast<std::size_t>(j)] * xh[j] + bv[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero padding) and upsampling

namespace detail {
inline int conv_out_extent(int in, int k, int stride, int dilation, int padding) {
  return (in + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
}
}  // namespace detail

/// x[Cin,H,W] * w[Cout,Cin,kh,kw] + b[Cout] -> [Cout,H',W'].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1,
                     int dilation = 1, int padding = 0) {
  Graph& g = detail::same_graph(x, w);
  detail::same_graph(x, b);
  expect_shape(x.rank() == 3 && w.rank() == 4 && b.rank() == 1,
               "conv2d: expected x[C,H,W], w[Co,Ci,kh,kw], b[Co]; got " + shape_str(x.shape()) + ", " +
                   shape_str(w.shape()) + ", " + shape_str(b.shape()));
  expect_shape(x.dim(0) == w.dim(1) && w.dim(0) == b.dim(0),
               "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  if (stride < 1 || dilation < 1 || padding < 0) throw UsageError("conv2d: invalid stride/dilation/padding");
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ho = detail::conv_out_extent(h, kh, stride, dilation, padding);
  const int wo = detail::conv_out_extent(wd, kw, stride, dilation, padding);
  expect_shape(ho >= 1 && wo >= 1, "conv2d: non-positive output extent for input " + shape_str(x.shape()) +
                                       " with kernel " + shape_str(w.shape()) + ", stride " +
                                       std::to_string(stride) + ", dilation " + std::to_string(dilation) +
                                       ", padding " + std::to_string(padding));
  const int K = ci * kh * kw;
  const std::int64_t L = static_cast<std::int64_t>(ho) * wo;

  auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(K) * L, 0.0);
  {
    const auto& xv = x.value();
    double* cp = col->data();
    for (int c0 = 0; c0 < ci; ++c0)
      for (int r = 0; r < kh; ++r)
        for (int q = 0; q < kw; ++q) {
          double* row = cp + (static_cast<std::int64_t>((c0 * kh + r) * kw + q)) * L;
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride - padding + r * dilation;
            if (ih < 0 || ih >= h) continue;
            const double* xrow = xv.data() + (static_cast<std::int64_t>(c0) * h + ih) * wd;
            double* orow = row + static_cast<std::int64_t>(oh) * wo;
            for (int ow = 0; ow < wo; ++ow) {
              const int iw = ow * stride - padding + q * dilation;
              if (iw >= 0 && iw < wd) orow[ow] = xrow[iw];
            }
          }
        }
  }

  const int xi = x.id(), wi = w.id(), bi = b.id();
  Tensor out = g.make({co, ho, wo}, {xi, wi, bi},
                      [xi, wi, bi, col, ci, h, wd, co, kh, kw, ho, wo, stride, dilation, padding, K,
                       L](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;  // [co, L]
    auto& nx = gr.node(xi);
    auto& nw = gr.node(wi);
    auto& nb = gr.node(bi);
    if (nb.requires_grad) {
      for (int oc = 0; oc < co; ++oc) {
        double acc = 0.0;
        const double* p = dy.data() + oc * L;
        for (std::int64_t i = 0; i < L; ++i) acc += p[i];
        nb.grad[static_cast<std::size_t>(oc)] += acc;
      }
    }
    if (nw.requires_grad)
      mm_nt_acc(dy.data(), col->data(), nw.grad.data(), co, static_cast<int>(L), K);
    if (nx.requires_grad) {
      std::vector<double> dcol(static_cast<std::size_t>(K) * L, 0.0);
      mm_tn_acc(nw.val.data(), dy.data(), dcol.data(), co, K, static_cast<int>(L));
      double* dxp = nx.grad.data();
      for (int c0 = 0; c0 < ci; ++c0)
        for (int r = 0; r < kh; ++r)
          for (int q = 0; q < kw; ++q) {
            const double* row = dcol.data() + (static_cast<std::int64_t>((c0 * kh + r) * kw + q)) * L;
            for (int oh = 0; oh < ho; ++oh) {
              const int ih = oh * stride - padding + r * dilation;
              if (ih < 0 || ih >= h) continue;
              double* xrow = dxp + (static_cast<std::int64_t>(c0) * h + ih) * wd;
              const double* orow = row + static_cast<std::int64_t>(oh) * wo;
              for (int ow = 0; ow < wo; ++ow) {
                const int iw = ow * stride - padding + q * dilation;
                if (iw >= 0 && iw < wd) xrow[iw] += orow[ow];
              }
            }
          }
    }
    col->clear();
    col->shrink_to_fit();
  });
  auto& y = g.node(out.id()).val;
  detail::mm_acc(w.value().data(), col->data(), y.data(), co, K, static_cast<int>(L));
  const auto& bv = b.value();
  for (int oc = 0; oc < co; ++oc) {
    double* p = y.data() + oc * L;
    for (std::int64_t i = 0; i < L; ++i) p[i] += bv[static_cast<std::size_t>(oc)];
  }
  return out;
}

/// x[Cin,L] * w[Cout,Cin,k] + b[Cout] -> [Cout,L'].
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int padding = 0) {
  Graph& g = detail::same_graph(x, w);
  detail::same_graph(x, b);
  expect_shape(x.rank() == 2 && w.rank() == 3 && b.rank() == 1 && x.dim(0) == w.dim(1) && w.dim(0) == b.dim(0),
               "conv1d: shapes " + shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " + shape_str(b.shape()));
  const int ci = x.dim(0), len = x.dim(1);
  const int co = w.dim(0), k = w.dim(2);
  const int lo = len + 2 * padding - k + 1;
  expect_shape(lo >= 1, "conv1d: non-positive output length for input " + shape_str(x.shape()) +
                            " with kernel " + shape_str(w.shape()));
  const int xi = x.id(), wi = w.id(), bi = b.id();
  Tensor out = g.make({co, lo}, {xi, wi, bi}, [xi, wi, bi, ci, len, co, k, lo, padding](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    auto& nx = gr.node(xi);
    auto& nw = gr.node(wi);
    auto& nb = gr.node(bi);
    for (int oc = 0; oc < co; ++oc)
      for (int o = 0; o < lo; ++o) {
        const double d = dy[static_cast<std::size_t>(oc) * lo + o];
        if (nb.requires_grad) nb.grad[static_cast<std::size_t>(oc)] += d;
        for (int icn = 0; icn < ci; ++icn)
          for (int t = 0; t < k; ++t) {
            const int i = o - padding + t;
            if (i < 0 || i >= len) continue;
            if (nw.requires_grad)
              nw.grad[(static_cast<std::size_t>(oc) * ci + icn) * k + t] += d * nx.val[static_cast<std::size_t>(icn) * len + i];
            if (nx.requires_grad)
              nx.grad[static_cast<std::size_t>(icn) * len + i] += d * nw.val[(static_cast<std::size_t>(oc) * ci + icn) * k + t];
          }
      }
  });
  auto& y = g.node(out.id()).val;
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  for (int oc = 0; oc < co; ++oc)
    for (int o = 0; o < lo; ++o) {
      double acc = bv[static_cast<std::size_t>(oc)];
      for (int icn = 0; icn < ci; ++icn)
        for (int t = 0; t < k; ++t) {
          const int i = o - padding + t;
          if (i >= 0 && i < len) acc += wv[(static_cast<std::size_t>(oc) * ci + icn) * k + t] * xv[static_cast<std::size_t>(icn) * len + i];
        }
      y[static_cast<std::size_t>(oc) * lo + o] = acc;
    }
  return out;
}

/// Channel-wise bilinear upsampling, align-corners off:
/// source coordinate of output o is (o + 0.5)/factor - 0.5, edges clamped.
inline Tensor bilinear_upsample(const Tensor& x, int factor) {
  Graph& g = *x.graph();
  expect_shape(x.rank() == 3, "bilinear_upsample: expected [C,H,W], got " + shape_str(x.shape()));
  if (factor < 1) throw UsageError("bilinear_upsample: factor must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = h * factor, wo = w * factor;

  struct Axis {
    std::vector<int> i0, i1;
    std::vector<double> t;
  };
  auto make_axis = [factor](int in, int out) {
    Axis ax;
    ax.i0.resize(static_cast<std::size_t>(out));
    ax.i1.resize(static_cast<std::size_t>(out));
    ax.t.resize(static_cast<std::size_t>(out));
    for (int o = 0; o < out; ++o) {
      const double src = (o + 0.5) / factor - 0.5;
      double fl = std::floor(src);
      double t = src - fl;
      int i0 = static_cast<int>(fl);
      int i1 = i0 + 1;
      if (i0 < 0) { i0 = 0; i1 = 0; t = 0.0; }
      if (i1 >= in) { i1 = in - 1; i0 = in - 1; t = 0.0; }
      ax.i0[static_cast<std::size_t>(o)] = i0;
      ax.i1[static_cast<std::size_t>(o)] = i1;
      ax.t[static_cast<std::size_t>(o)] = t;
    }
    return ax;
  };
  auto ay = std::make_shared<Axis>(make_axis(h, ho));
  auto axx = std::make_shared<Axis>(make_axis(w, wo));

  const int xi = x.id();
  Tensor out = g.make({c, ho, wo}, {xi}, [xi, ay, axx, c, h, w, ho, wo](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    auto& dx = gr.node(xi).grad;
    for (int ch = 0; ch < c; ++ch) {
      double* dxc = dx.data() + static_cast<std::int64_t>(ch) * h * w;
      const double* dyc = dy.data() + static_cast<std::int64_t>(ch) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        const int y0 = ay->i0[static_cast<std::size_t>(oy)], y1 = ay->i1[static_cast<std::size_t>(oy)];
        const double ty = ay->t[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < wo; ++ox) {
          const int x0 = axx->i0[static_cast<std::size_t>(ox)], x1 = axx->i1[static_cast<std::size_t>(ox)];
          const double tx = axx->t[static_cast<std::size_t>(ox)];
          const double d = dyc[static_cast<std::int64_t>(oy) * wo + ox];
          dxc[static_cast<std::int64_t>(y0) * w + x0] += d * (1 - ty) * (1 - tx);
          dxc[static_cast<std::int64_t>(y0) * w + x1] += d * (1 - ty) * tx;
          dxc[static_cast<std::int64_t>(y1) * w + x0] += d * ty * (1 - tx);
          dxc[static_cast<std::int64_t>(y1) * w + x1] += d * ty * tx;
        }
      }
    }
  });
  auto& y = g.node(out.id()).val;
  const auto& xv = x.value();
  for (int ch = 0; ch < c; ++ch) {
    const double* xc = xv.data() + static_cast<std::int64_t>(ch) * h * w;
    double* yc = y.data() + static_cast<std::int64_t>(ch) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      const int y0 = ay->i0[static_cast<std::size_t>(oy)], y1 = ay->i1[static_cast<std::size_t>(oy)];
      const double ty = ay->t[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < wo; ++ox) {
        const int x0 = axx->i0[static_cast<std::size_t>(ox)], x1 = axx->i1[static_cast<std::size_t>(ox)];
        const double tx = axx->t[static_cast<std::size_t>(ox)];
        yc[static_cast<std::int64_t>(oy) * wo + ox] =
            (1 - ty) * ((1 - tx) * xc[static_cast<std::int64_t>(y0) * w + x0] + tx * xc[static_cast<std::int64_t>(y0) * w + x1]) +
            ty * ((1 - tx) * xc[static_cast<std::int64_t>(y1) * w + x0] + tx * xc[static_cast<std::int64_t>(y1) * w + x1]);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lookup / losses / similarity

inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  Graph& g = *table.graph();
  expect_shape(table.rank() == 2, "gather_rows: expected [V,C] table, got " + shape_str(table.shape()));
  const int v = table.dim(0), c = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v) throw UsageError("gather_rows: row id " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
  const int n = static_cast<int>(ids.size());
  const int ti = table.id();
  Tensor out = g.make({n, c}, {ti}, [ti, ids, c](Graph& gr, int self) {
    const auto& dy = gr.node(self).grad;
    auto& dt = gr.node(ti).grad;
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < c; ++j) dt[static_cast<std::size_t>(ids[i]) * c + j] += dy[i * c + j];
  });
  auto& y = g.node(out.id()).val;
  const auto& tv = table.value();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(tv.begin() + static_cast<std::int64_t>(ids[i]) * c, tv.begin() + (static_cast<std::int64_t>(ids[i]) + 1) * c,
              y.begin() + static_cast<std::int64_t>(i) * c);
  return out;
}

enum class Reduction { mean, sum };

/// Numerically stable binary cross entropy on logits; targets are constants.
inline Tensor bce_with_logits(const Tensor& z, const Tensor& targets, Reduction red = Reduction::mean) {
  Graph& g = detail::same_graph(z, targets);
  expect_shape(z.shape() == targets.shape(),
               "bce_with_logits: shape mismatch " + shape_str(z.shape()) + " vs " + shape_str(targets.shape()));
  const std::int64_t n = z.size();
  const double wgt = red == Reduction::mean ? 1.0 / static_cast<double>(n) : 1.0;
  const int zi = z.id(), ti = targets.id();
  Tensor out = g.make({1}, {zi, ti}, [zi, ti, wgt](Graph& gr, int self) {
    const double dy = gr.node(self).grad[0];
    auto& nz = gr.node(zi);
    const auto& tv = gr.node(ti).val;
    if (!nz.requires_grad) return;
    for (std::size_t i = 0; i < nz.val.size(); ++i) {
      const double x = nz.val[i];
      const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      nz.grad[i] += dy * wgt * (s - tv[i]);
    }
  });
  double acc = 0.0;
  const auto& zv = z.value();
  const auto& tv = targets.value();
  for (std::int64_t i = 0; i < n; ++i) {
    const double x = zv[static_cast<std::size_t>(i)];
    acc += std::max(x, 0.0) - x * tv[static_cast<std::size_t>(i)] + std::log1p(std::exp(-std::abs(x)));
  }
  g.node(out.id()).val[0] = acc * wgt;
  return out;
}

/// BCE on probabilities in (0,1); p is clamped to [1e-12, 1-1e-12] internally.
inline Tensor bce_probs(const Tensor& p, const Tensor& targets, Reduction red = Reduction::mean) {
  Graph& g = detail::same_graph(p, targets);
  expect_shape(p.shape() == targets.shape(),
               "bce_probs: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(targets.shape()));
  constexpr double kEps = 1e-12;
  const std::int64_t n = p.size();
  const double wgt = red == Reduction::mean ? 1.0 / static_cast<double>(n) : 1.0;
  const int pi = p.id(), ti = targets.id();
  Tensor out = g.make({1}, {pi, ti}, [pi, ti, wgt](Graph& gr, int self) {
    const double dy = gr.node(self).grad[0];
    auto& np = gr.node(pi);
    const auto& tv = gr.node(ti).val;
    if (!np.requires_grad) return;
    for (std::size_t i = 0; i < np.val.size(); ++i) {
      const double pc = std::min(std::max(np.val[i], kEps), 1.0 - kEps);
      if (np.val[i] <= kEps || np.val[i] >= 1.0 - kEps) continue;  // clipped region
      np.grad[i] += dy * wgt * (pc - tv[i]) / (pc * (1.0 - pc));
    }
  });
  double acc = 0.0;
  const auto& pv = p.value();
  const auto& tv = targets.value();
  for (std::int64_t i = 0; i < n; ++i) {
    const double pc = std::min(std::max(pv[static_cast<std::size_t>(i)], kEps), 1.0 - kEps);
    acc -= tv[static_cast<std::size_t>(i)] * std::log(pc) + (1.0 - tv[static_cast<std::size_t>(i)]) * std::log(1.0 - pc);
  }
  g.node(out.id()).val[0] = acc * wgt;
  return out;
}

/// Cosine similarity of each row of u[P,c] against v[c] -> [P].
/// Zero-norm operands yield similarity 0 and bump the graph diagnostics counter.
inline Tensor cosine_rows(const Tensor& u, const Tensor& v) {
  Graph& g = detail::same_graph(u, v);
  expect_shape(u.rank() == 2 && v.rank() == 1 && u.dim(1) == v.dim(0),
               "cosine_rows: shapes " + shape_str(u.shape()) + " and " + shape_str(v.shape()));
  const int p = u.dim(0), c = u.dim(1);
  const int ui = u.id(), vi = v.id();
  Tensor out = g.make({p}, {ui, vi}, [ui, vi, p, c](Graph& gr, int self) {
    const auto& n = gr.node(self);
    auto& nu = gr.node(ui);
    auto& nv = gr.node(vi);
    const auto& vv = nv.val;
    double nv2 = 0.0;
    for (int j = 0; j < c; ++j) nv2 += vv[static_cast<std::size_t>(j)] * vv[static_cast<std::size_t>(j)];
    const double nvn = std::sqrt(nv2);
    if (nvn == 0.0) return;
    for (int i = 0; i < p; ++i) {
      const double* uri = nu.val.data() + static_cast<std::int64_t>(i) * c;
      double nu2 = 0.0;
      for (int j = 0; j < c; ++j) nu2 += uri[j] * uri[j];
      const double nun = std::sqrt(nu2);
      if (nun == 0.0) continue;
      const double s = n.val[static_cast<std::size_t>(i)];
      const double d = n.grad[static_cast<std::size_t>(i)];
      if (d == 0.0) continue;
      const double inv = 1.0 / (nun * nvn);
      if (nu.requires_grad) {
        double* du = nu.grad.data() + static_cast<std::int64_t>(i) * c;
        for (int j = 0; j < c; ++j) du[j] += d * (vv[static_cast<std::size_t>(j)] * inv - s * uri[j] / nu2);
      }
      if (nv.requires_grad) {
        for (int j = 0; j < c; ++j) nv.grad[static_cast<std::size_t>(j)] += d * (uri[j] * inv - s * vv[static_cast<std::size_t>(j)] / nv2);
      }
    }
  });
  auto& y = g.node(out.id()).val;
  const auto& uv = u.value();
  const auto& vv = v.value();
  double nv2 = 0.0;
  for (int j = 0; j < c; ++j) nv2 += vv[static_cast<std::size_t>(j)] * vv[static_cast<std::size_t>(j)];
  const double nvn = std::sqrt(nv2);
  for (int i = 0; i < p; ++i) {
    const double* uri = uv.data() + static_cast<std::int64_t>(i) * c;
    double nu2 = 0.0, dot = 0.0;
    for (int j = 0; j < c; ++j) {
      nu2 += uri[j] * uri[j];
      dot += uri[j] * vv[static_cast<std::size_t>(j)];
    }
    const double nun = std::sqrt(nu2);
    if (nun == 0.0 || nvn == 0.0) {
      y[static_cast<std::size_t>(i)] = 0.0;
      ++g.diagnostics.zero_norm_cosine;
    } else {
      y[static_cast<std::size_t>(i)] = dot / (nun * nvn);
    }
  }
  return out;
}

/// Cosine similarity for an explicit pair list: out[k] = cos(a[pairs[k].first], b[pairs[k].second]).
inline Tensor cosine_pairs(const Tensor& a, const Tensor& b, const std::vector<std::pair<int, int>>& pairs) {
  Graph& g = detail::same_graph(a, b);
  expect_shape(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
               "cosine_pairs: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int c = a.dim(1);
  for (const auto& pr : pairs)
    if (pr.first < 0 || pr.first >= a.dim(0) || pr.second < 0 || pr.second >= b.dim(0))
      throw UsageError("cosine_pairs: pair index out of range");
  const int k = static_cast<int>(pairs.size());
  const int ai = a.id(), bi = b.id();
  Tensor out = g.make({k}, {ai, bi}, [ai, bi, pairs, c](Graph& gr, int self) {
    const auto& n = gr.node(self);
    auto& na = gr.node(ai);
    auto& nb = gr.node(bi);
    for (std::size_t t = 0; t < pairs.size(); ++t) {
      const double d = n.grad[t];
      if (d == 0.0) continue;
      const double* ar = na.val.data() + static_cast<std::int64_t>(pairs[t].first) * c;
      const double* br = nb.val.data() + static_cast<std::int64_t>(pairs[t].second) * c;
      double na2 = 0.0, nb2 = 0.0;
      for (int j = 0; j < c; ++j) {
        na2 += ar[j] * ar[j];
        nb2 += br[j] * br[j];
      }
      const double nan = std::sqrt(na2), nbn = std::sqrt(nb2);
      if (nan == 0.0 || nbn == 0.0) continue;
      const double s = n.val[t];
      const double inv = 1.0 / (nan * nbn);
      if (na.requires_grad) {
        double* da = na.grad.data() + static_cast<std::int64_t>(pairs[t].first) * c;
        for (int j = 0; j < c; ++j) da[j] += d * (br[j] * inv - s * ar[j] / na2);
      }
      if (nb.requires_grad) {
        double* db = nb.grad.data() + static_cast<std::int64_t>(pairs[t].second) * c;
        for (int j = 0; j < c; ++j) db[j] += d * (ar[j] * inv - s * br[j] / nb2);
      }
    }
  });
  auto& y = g.node(out.id()).val;
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t t = 0; t < pairs.size(); ++t) {
    const double* ar = av.data() + static_cast<std::int64_t>(pairs[t].first) * c;
    const double* br = bv.data() + static_cast<std::int64_t>(pairs[t].second) * c;
    double na2 = 0.0, nb2 = 0.0, dot = 0.0;
    for (int j = 0; j < c; ++j) {
      na2 += ar[j] * ar[j];
      nb2 += br[j] * br[j];
      dot += ar[j] * br[j];
    }
    const double nan = std::sqrt(na2), nbn = std::sqrt(nb2);
    if (nan == 0.0 || nbn == 0.0) {
      y[t] = 0.0;
      ++g.diagnostics.zero_norm_cosine;
    } else {
      y[t] = dot / (nan * nbn);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

struct Param {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string n, Shape s)
      : name(std::move(n)),
        shape(std::move(s)),
        value(static_cast<std::size_t>(numel(shape)), 0.0),
        grad(static_cast<std::size_t>(numel(shape)), 0.0) {}
  std::int64_t size() const { return numel(shape); }
};

inline void init_uniform_fan(Param& p, int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : p.value) v = rng.uniform(-a, a);
}

inline void init_constant(Param& p, double v) { std::fill(p.value.begin(), p.value.end(), v); }

/// Per-forward binding of persistent parameters to graph leaves.
class Bindings {
 public:
  Tensor bind(Graph& g, Param& p) {
    Tensor t = g.leaf(p.shape, p.value, true);
    items_.push_back({&p, t});
    return t;
  }

  /// Copy accumulated node gradients back into the parameters.
  void write_grads() {
    for (auto& [p, t] : items_) {
      const auto& gr = t.grad();
      if (gr.empty())
        std::fill(p->grad.begin(), p->grad.end(), 0.0);
      else
        p->grad = gr;
    }
  }

 private:
  std::vector<std::pair<Param*, Tensor>> items_;
};

}  // namespace tvseg
