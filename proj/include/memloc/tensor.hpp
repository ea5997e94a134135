#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "memloc/error.hpp"

namespace memloc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

/// Dense row-major array. Scalars use shape {1}.
template <class S>
class basic_tensor {
 public:
  using value_type = S;

  basic_tensor() : shape_{0} {}
  explicit basic_tensor(Shape shape, S fill = S{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  basic_tensor(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
  }

  static basic_tensor scalar(S v) { return basic_tensor({1}, std::vector<S>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  /// Size of the innermost dimension.
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all leading dimensions.
  std::size_t rows() const noexcept {
    const auto c = cols();
    return c == 0 ? shape_size(Shape(shape_.begin(), shape_.end() - 1)) : size() / c;
  }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }
  std::span<S> values() noexcept { return data_; }
  std::span<const S> values() const noexcept { return data_; }
  const std::vector<S>& storage() const noexcept { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }
  S& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const S& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  std::span<const S> row(std::size_t r) const {
    return std::span<const S>(data_).subspan(r * cols(), cols());
  }
  std::span<S> row(std::size_t r) { return std::span<S>(data_).subspan(r * cols(), cols()); }

  template <class T>
  basic_tensor<T> cast() const {
    return basic_tensor<T>(shape_, std::vector<T>(data_.begin(), data_.end()));
  }

  friend bool operator==(const basic_tensor& a, const basic_tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<S> data_;
};

using Tensor = basic_tensor<float>;

/// Equality of shape and of the exact bit patterns of every element.
template <class S>
bool bitwise_equal(const basic_tensor<S>& a, const basic_tensor<S>& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(S)) == 0);
}

template <class S>
bool all_finite(const basic_tensor<S>& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](S v) { return std::isfinite(v); });
}

template <class S>
class basic_tape;

/// Handle to a value recorded on a tape.
template <class S>
struct basic_var {
  basic_tape<S>* tape = nullptr;
  std::size_t id = 0;

  const basic_tensor<S>& value() const { return tape->value(id); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so walking them backwards is a reverse topological traversal.
/// A tape is single-owner; vars keep a raw pointer to it.
template <class S>
class basic_tape {
 public:
  using tensor_type = basic_tensor<S>;
  using var_type = basic_var<S>;
  using backward_fn = std::function<void(basic_tape&, std::size_t)>;

  explicit basic_tape(bool recording = true) : recording_(recording) {}
  basic_tape(const basic_tape&) = delete;
  basic_tape& operator=(const basic_tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  var_type leaf(tensor_type value, bool requires_grad = false) {
    return record(std::move(value), requires_grad && recording_, nullptr);
  }

  var_type record(tensor_type value, bool requires_grad, backward_fn fn) {
    nodes_.push_back(node{std::move(value), {}, requires_grad, std::move(fn)});
    return var_type{this, nodes_.size() - 1};
  }

  const tensor_type& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer for a node, allocated as zeros on first touch.
  S* grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), S{0});
    return n.grad.data();
  }
  const S* grad_data(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.grad.empty() ? nullptr : n.grad.data();
  }

  /// Accumulated gradient of a node; zeros when the node was not reached.
  tensor_type grad(var_type v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.empty()) return tensor_type(n.value.shape());
    return tensor_type(n.value.shape(), n.grad);
  }

  void backward(var_type loss) {
    if (loss.tape != this) throw UsageError("backward: loss belongs to a different tape");
    if (!recording_) throw UsageError("backward: tape was not recording");
    if (backward_done_) throw UsageError("backward called twice without reset()");
    if (value(loss.id).size() != 1) throw DimensionError("backward: loss must be a scalar");
    backward_done_ = true;
    visits_ = 0;
    grad_buffer(loss.id)[0] = S{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      ++visits_;
      n.backward(*this, i);
    }
  }

  /// Number of interior nodes whose backward rule ran in the last backward().
  std::size_t last_visit_count() const noexcept { return visits_; }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
    visits_ = 0;
  }

 private:
  struct node {
    tensor_type value;
    std::vector<S> grad;
    bool requires_grad = false;
    backward_fn backward;
  };
  std::deque<node> nodes_;  // stable addresses: values stay valid as nodes are appended
  bool recording_;
  bool backward_done_ = false;
  std::size_t visits_ = 0;
};

using Tape = basic_tape<float>;
using Var = basic_var<float>;

namespace detail {

template <class S>
basic_tape<S>& same_tape(basic_var<S> a, basic_var<S> b) {
  if (a.tape != b.tape) throw UsageError("operands live on different tapes");
  return *a.tape;
}

template <class S, class... V>
bool tracks(const basic_tape<S>& t, V... v) {
  return t.recording() && (v.requires_grad() || ...);
}

// c[m x n] = a[m x k] * b[k x n]
template <class S>
void gemm(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c, c + m * n, S{0});
  for (std::size_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = a[i * k + p];
      const S* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class S>
S erf_of(S x) {
  return std::erf(x);
}

}  // namespace detail

/// Matrix product of two rank-2 tensors.
template <class S>
basic_var<S> matmul(basic_var<S> a, basic_var<S> b) {
  auto& tape = detail::same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_string(A.shape()) + " by " +
                         shape_string(B.shape()));
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  basic_tensor<S> C({m, n});
  detail::gemm(A.data(), B.data(), C.data(), m, k, n);
  const bool rg = detail::tracks(tape, a, b);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [ai = a.id, bi = b.id, m, k, n](basic_tape<S>& t, std::size_t self) {
      const S* dc = t.grad_data(self);
      const S* av = t.value(ai).data();
      const S* bv = t.value(bi).data();
      if (t.requires_grad(ai)) {
        S* da = t.grad_buffer(ai);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            S acc{0};
            const S* brow = bv + p * n;
            const S* dcrow = dc + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
            da[i * k + p] += acc;
          }
      }
      if (t.requires_grad(bi)) {
        S* db = t.grad_buffer(bi);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const S x = av[i * k + p];
            S* dbrow = db + p * n;
            const S* dcrow = dc + i * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += x * dcrow[j];
          }
      }
    };
  }
  return tape.record(std::move(C), rg, std::move(fn));
}

/// Elementwise sum of two equally shaped tensors.
template <class S>
basic_var<S> add(basic_var<S> a, basic_var<S> b) {
  auto& tape = detail::same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape())
    throw DimensionError("add: shape " + shape_string(A.shape()) + " vs " +
                         shape_string(B.shape()));
  basic_tensor<S> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] + B[i];
  const bool rg = detail::tracks(tape, a, b);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [ai = a.id, bi = b.id](basic_tape<S>& t, std::size_t self) {
      const S* dc = t.grad_data(self);
      const std::size_t n = t.value(self).size();
      for (std::size_t id : {ai, bi}) {
        if (!t.requires_grad(id)) continue;
        S* d = t.grad_buffer(id);
        for (std::size_t i = 0; i < n; ++i) d[i] += dc[i];
      }
    };
  }
  return tape.record(std::move(C), rg, std::move(fn));
}

/// Adds a bias vector of length cols() to every row.
template <class S>
basic_var<S> add_bias(basic_var<S> x, basic_var<S> bias) {
  auto& tape = detail::same_tape(x, bias);
  const auto& X = x.value();
  const auto& B = bias.value();
  if (B.size() != X.cols())
    throw DimensionError("add_bias: bias " + shape_string(B.shape()) + " for input " +
                         shape_string(X.shape()));
  basic_tensor<S> Y(X.shape());
  const std::size_t r = X.rows(), c = X.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) Y[i * c + j] = X[i * c + j] + B[j];
  const bool rg = detail::tracks(tape, x, bias);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [xi = x.id, bi = bias.id, r, c](basic_tape<S>& t, std::size_t self) {
      const S* dy = t.grad_data(self);
      if (t.requires_grad(xi)) {
        S* dx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < r * c; ++i) dx[i] += dy[i];
      }
      if (t.requires_grad(bi)) {
        S* db = t.grad_buffer(bi);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) db[j] += dy[i * c + j];
      }
    };
  }
  return tape.record(std::move(Y), rg, std::move(fn));
}

/// Elementwise product.
template <class S>
basic_var<S> mul(basic_var<S> a, basic_var<S> b) {
  auto& tape = detail::same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape())
    throw DimensionError("mul: shape " + shape_string(A.shape()) + " vs " +
                         shape_string(B.shape()));
  basic_tensor<S> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
  const bool rg = detail::tracks(tape, a, b);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [ai = a.id, bi = b.id](basic_tape<S>& t, std::size_t self) {
      const S* dc = t.grad_data(self);
      const std::size_t n = t.value(self).size();
      const S* av = t.value(ai).data();
      const S* bv = t.value(bi).data();
      if (t.requires_grad(ai)) {
        S* d = t.grad_buffer(ai);
        for (std::size_t i = 0; i < n; ++i) d[i] += dc[i] * bv[i];
      }
      if (t.requires_grad(bi)) {
        S* d = t.grad_buffer(bi);
        for (std::size_t i = 0; i < n; ++i) d[i] += dc[i] * av[i];
      }
    };
  }
  return tape.record(std::move(C), rg, std::move(fn));
}

template <class S>
basic_var<S> scale(basic_var<S> a, S factor) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  basic_tensor<S> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * factor;
  const bool rg = detail::tracks(tape, a);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [ai = a.id, factor](basic_tape<S>& t, std::size_t self) {
      const S* dc = t.grad_data(self);
      S* d = t.grad_buffer(ai);
      const std::size_t n = t.value(self).size();
      for (std::size_t i = 0; i < n; ++i) d[i] += dc[i] * factor;
    };
  }
  return tape.record(std::move(C), rg, std::move(fn));
}

template <class S>
basic_var<S> negate(basic_var<S> a) {
  return scale(a, S{-1});
}

/// Sum of all elements, as a shape-{1} scalar.
template <class S>
basic_var<S> sum(basic_var<S> a) {
  auto& tape = *a.tape;
  S total{0};
  for (S v : a.value().values()) total += v;
  const bool rg = detail::tracks(tape, a);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [ai = a.id](basic_tape<S>& t, std::size_t self) {
      const S g = t.grad_data(self)[0];
      S* d = t.grad_buffer(ai);
      const std::size_t n = t.value(ai).size();
      for (std::size_t i = 0; i < n; ++i) d[i] += g;
    };
  }
  return tape.record(basic_tensor<S>::scalar(total), rg, std::move(fn));
}

/// Exact (erf-based) GELU.
template <class S>
basic_var<S> gelu(basic_var<S> a) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  basic_tensor<S> C(A.shape());
  const S inv_sqrt2 = S(0.70710678118654752440);
  for (std::size_t i = 0; i < C.size(); ++i)
    C[i] = S(0.5) * A[i] * (S(1) + detail::erf_of(A[i] * inv_sqrt2));
  const bool rg = detail::tracks(tape, a);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [ai = a.id, inv_sqrt2](basic_tape<S>& t, std::size_t self) {
      const S* dc = t.grad_data(self);
      const S* x = t.value(ai).data();
      S* d = t.grad_buffer(ai);
      const std::size_t n = t.value(ai).size();
      // cdf + x*pdf cancels near x = -0.75; evaluate it in double.
      for (std::size_t i = 0; i < n; ++i) {
        const double xi = static_cast<double>(x[i]);
        const double cdf = 0.5 * (1.0 + std::erf(xi * static_cast<double>(inv_sqrt2)));
        const double pdf = 0.39894228040143267794 * std::exp(-0.5 * xi * xi);
        d[i] += dc[i] * static_cast<S>(cdf + xi * pdf);
      }
    };
  }
  return tape.record(std::move(C), rg, std::move(fn));
}

template <class S>
basic_var<S> relu(basic_var<S> a) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  basic_tensor<S> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] > S{0} ? A[i] : S{0};
  const bool rg = detail::tracks(tape, a);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [ai = a.id](basic_tape<S>& t, std::size_t self) {
      const S* dc = t.grad_data(self);
      const S* x = t.value(ai).data();
      S* d = t.grad_buffer(ai);
      const std::size_t n = t.value(ai).size();
      for (std::size_t i = 0; i < n; ++i)
        if (x[i] > S{0}) d[i] += dc[i];
    };
  }
  return tape.record(std::move(C), rg, std::move(fn));
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise normalisation over the last dimension followed by gain and bias.
template <class S>
basic_var<S> layer_norm(basic_var<S> x, basic_var<S> gain, basic_var<S> bias,
                        S eps = S(kLayerNormEps)) {
  auto& tape = detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  const auto& X = x.value();
  const std::size_t d = X.cols();
  if (d == 0) throw DimensionError("layer_norm: last dimension must be >= 1");
  if (gain.value().size() != d || bias.value().size() != d)
    throw DimensionError("layer_norm: gain/bias must have length " + std::to_string(d));
  const std::size_t r = X.rows();
  const S* g = gain.value().data();
  const S* b = bias.value().data();
  basic_tensor<S> Y(X.shape());
  std::vector<S> xhat(X.size());
  std::vector<S> rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    const S* row = X.data() + i * d;
    S mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= S(d);
    S var{0};
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= S(d);
    rstd[i] = S(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const S h = (row[j] - mean) * rstd[i];
      xhat[i * d + j] = h;
      Y[i * d + j] = h * g[j] + b[j];
    }
  }
  const bool rg = detail::tracks(tape, x, gain, bias);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [xi = x.id, gi = gain.id, bi = bias.id, r, d, xhat = std::move(xhat),
          rstd = std::move(rstd)](basic_tape<S>& t, std::size_t self) {
      const S* dy = t.grad_data(self);
      const S* g = t.value(gi).data();
      if (t.requires_grad(gi)) {
        S* dg = t.grad_buffer(gi);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < d; ++j) dg[j] += dy[i * d + j] * xhat[i * d + j];
      }
      if (t.requires_grad(bi)) {
        S* db = t.grad_buffer(bi);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < d; ++j) db[j] += dy[i * d + j];
      }
      if (t.requires_grad(xi)) {
        S* dx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < r; ++i) {
          S mean_dh{0}, mean_dh_h{0};
          for (std::size_t j = 0; j < d; ++j) {
            const S dh = dy[i * d + j] * g[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[i * d + j];
          }
          mean_dh /= S(d);
          mean_dh_h /= S(d);
          for (std::size_t j = 0; j < d; ++j) {
            const S dh = dy[i * d + j] * g[j];
            dx[i * d + j] += rstd[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
          }
        }
      }
    };
  }
  return tape.record(std::move(Y), rg, std::move(fn));
}

/// Row lookup: result row i is table row ids[i].
template <class S>
basic_var<S> embedding(basic_var<S> table, std::span<const std::int32_t> ids) {
  auto& tape = *table.tape;
  const auto& T = table.value();
  if (T.rank() != 2) throw DimensionError("embedding: table must be rank 2");
  const std::size_t v = T.dim(0), d = T.dim(1), n = ids.size();
  basic_tensor<S> Y({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(v) + " rows");
    std::copy_n(T.data() + ids[i] * d, d, Y.data() + i * d);
  }
  const bool rg = detail::tracks(tape, table);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [ti = table.id, ids = std::vector<std::int32_t>(ids.begin(), ids.end()), d](
             basic_tape<S>& t, std::size_t self) {
      const S* dy = t.grad_data(self);
      S* dt = t.grad_buffer(ti);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) dt[ids[i] * d + j] += dy[i * d + j];
    };
  }
  return tape.record(std::move(Y), rg, std::move(fn));
}

/// Multi-head scaled dot-product self-attention over padded sequences.
/// q, k, v are [batch*seq x d]; keys at positions >= lengths[e] are masked.
template <class S>
basic_var<S> attention(basic_var<S> q, basic_var<S> k, basic_var<S> v, std::size_t batch,
                       std::size_t seq, std::size_t heads,
                       std::span<const std::size_t> lengths) {
  auto& tape = detail::same_tape(q, k);
  detail::same_tape(q, v);
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  const std::size_t d = Q.cols();
  if (Q.shape() != K.shape() || Q.shape() != V.shape() || Q.rows() != batch * seq ||
      heads == 0 || d % heads != 0 || lengths.size() != batch)
    throw DimensionError("attention: inconsistent operand shapes");
  const std::size_t dh = d / heads;
  const S scl = S(1) / std::sqrt(S(dh));
  basic_tensor<S> O({batch * seq, d});
  std::vector<S> probs(batch * heads * seq * seq, S{0});
  std::vector<S> scores(seq);
  for (std::size_t e = 0; e < batch; ++e) {
    const std::size_t len = lengths[e];
    if (len == 0 || len > seq) throw DimensionError("attention: bad sequence length");
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        const S* qi = Q.data() + (e * seq + i) * d + h * dh;
        S mx = -std::numeric_limits<S>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          const S* kj = K.data() + (e * seq + j) * d + h * dh;
          S s{0};
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * scl;
          mx = std::max(mx, scores[j]);
        }
        S z{0};
        for (std::size_t j = 0; j < len; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        S* p = probs.data() + ((e * heads + h) * seq + i) * seq;
        S* oi = O.data() + (e * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          p[j] = scores[j] / z;
          const S* vj = V.data() + (e * seq + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  const bool rg = detail::tracks(tape, q, k, v);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [qi_ = q.id, ki_ = k.id, vi_ = v.id, batch, seq, heads, d, dh, scl,
          lens = std::vector<std::size_t>(lengths.begin(), lengths.end()),
          probs = std::move(probs)](basic_tape<S>& t, std::size_t self) {
      const S* dO = t.grad_data(self);
      const S* Qd = t.value(qi_).data();
      const S* Kd = t.value(ki_).data();
      const S* Vd = t.value(vi_).data();
      const bool gq = t.requires_grad(qi_), gk = t.requires_grad(ki_),
                 gv = t.requires_grad(vi_);
      S* dQ = gq ? t.grad_buffer(qi_) : nullptr;
      S* dK = gk ? t.grad_buffer(ki_) : nullptr;
      S* dV = gv ? t.grad_buffer(vi_) : nullptr;
      std::vector<S> dp(seq);
      for (std::size_t e = 0; e < batch; ++e) {
        const std::size_t len = lens[e];
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < seq; ++i) {
            const S* p = probs.data() + ((e * heads + h) * seq + i) * seq;
            const S* doi = dO + (e * seq + i) * d + h * dh;
            S dot{0};
            for (std::size_t j = 0; j < len; ++j) {
              const S* vj = Vd + (e * seq + j) * d + h * dh;
              S s{0};
              for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
              dp[j] = s;
              dot += p[j] * s;
              if (gv) {
                S* dvj = dV + (e * seq + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * doi[c];
              }
            }
            const S* qi = Qd + (e * seq + i) * d + h * dh;
            for (std::size_t j = 0; j < len; ++j) {
              const S ds = p[j] * (dp[j] - dot) * scl;
              const S* kj = Kd + (e * seq + j) * d + h * dh;
              if (gq) {
                S* dqi = dQ + (e * seq + i) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
              }
              if (gk) {
                S* dkj = dK + (e * seq + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
      }
    };
  }
  return tape.record(std::move(O), rg, std::move(fn));
}

enum class Pooling { FirstToken, LastToken, Mean };

/// Reduces [batch*seq x d] to [batch x d] per sequence.
template <class S>
basic_var<S> pool(basic_var<S> x, std::size_t batch, std::size_t seq,
                  std::span<const std::size_t> lengths, Pooling mode) {
  auto& tape = *x.tape;
  const auto& X = x.value();
  const std::size_t d = X.cols();
  if (X.rows() != batch * seq || lengths.size() != batch)
    throw DimensionError("pool: inconsistent shapes");
  basic_tensor<S> Y({batch, d});
  for (std::size_t e = 0; e < batch; ++e) {
    const std::size_t len = lengths[e];
    S* y = Y.data() + e * d;
    if (mode == Pooling::Mean) {
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t c = 0; c < d; ++c) y[c] += X[(e * seq + i) * d + c];
      for (std::size_t c = 0; c < d; ++c) y[c] /= S(len);
    } else {
      const std::size_t pos = mode == Pooling::FirstToken ? 0 : len - 1;
      std::copy_n(X.data() + (e * seq + pos) * d, d, y);
    }
  }
  const bool rg = detail::tracks(tape, x);
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [xi = x.id, seq, d, mode, lens = std::vector<std::size_t>(lengths.begin(),
                                                                   lengths.end())](
             basic_tape<S>& t, std::size_t self) {
      const S* dy = t.grad_data(self);
      S* dx = t.grad_buffer(xi);
      for (std::size_t e = 0; e < lens.size(); ++e) {
        const std::size_t len = lens[e];
        if (mode == Pooling::Mean) {
          for (std::size_t i = 0; i < len; ++i)
            for (std::size_t c = 0; c < d; ++c) dx[(e * seq + i) * d + c] += dy[e * d + c] / S(len);
        } else {
          const std::size_t pos = mode == Pooling::FirstToken ? 0 : len - 1;
          for (std::size_t c = 0; c < d; ++c) dx[(e * seq + pos) * d + c] += dy[e * d + c];
        }
      }
    };
  }
  return tape.record(std::move(Y), rg, std::move(fn));
}

template <class S>
struct basic_cross_entropy {
  basic_var<S> loss;                 ///< mean (or weighted mean) negative log-likelihood
  basic_tensor<S> probabilities;     ///< row-wise softmax of the logits
  std::vector<S> target_probability; ///< probability assigned to each row's target
};

/// Softmax cross-entropy averaged over rows. Optional per-row weights turn
/// the mean into a weighted mean. An empty batch yields loss 0.
template <class S>
basic_cross_entropy<S> softmax_cross_entropy(basic_var<S> logits,
                                             std::span<const std::int32_t> targets,
                                             std::span<const S> weights = {}) {
  auto& tape = *logits.tape;
  const auto& L = logits.value();
  if (L.rank() != 2) throw DimensionError("softmax_cross_entropy: logits must be rank 2");
  const std::size_t b = L.dim(0), c = L.dim(1);
  if (targets.size() != b)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(b) + " rows");
  if (!weights.empty() && weights.size() != b)
    throw DimensionError("softmax_cross_entropy: weight count mismatch");
  basic_tensor<S> P({b, c});
  std::vector<S> tp(b);
  std::vector<S> w(b, S{1});
  if (!weights.empty()) std::copy(weights.begin(), weights.end(), w.begin());
  S wsum{0};
  for (S x : w) wsum += x;
  S total{0};
  for (std::size_t i = 0; i < b; ++i) {
    const auto t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= c)
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) +
                       " outside [0, " + std::to_string(c) + ")");
    const S* row = L.data() + i * c;
    S mx = *std::max_element(row, row + c);
    S z{0};
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const S logz = std::log(z) + mx;
    for (std::size_t j = 0; j < c; ++j) P[i * c + j] = std::exp(row[j] - logz);
    tp[i] = P[i * c + t];
    total += w[i] * (logz - row[t]);
  }
  const S loss = wsum > S{0} ? total / wsum : S{0};
  const bool rg = detail::tracks(tape, logits) && b > 0;
  typename basic_tape<S>::backward_fn fn;
  if (rg) {
    fn = [li = logits.id, b, c, P, w, wsum,
          tg = std::vector<std::int32_t>(targets.begin(), targets.end())](basic_tape<S>& t,
                                                                          std::size_t self) {
      const S g = t.grad_data(self)[0] / wsum;
      S* dl = t.grad_buffer(li);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const S y = static_cast<std::size_t>(tg[i]) == j ? S{1} : S{0};
          dl[i * c + j] += g * w[i] * (P[i * c + j] - y);
        }
    };
  }
  auto node = tape.record(basic_tensor<S>::scalar(loss), rg, std::move(fn));
  return {node, std::move(P), std::move(tp)};
}

}  // namespace memloc
