#include "caesar/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace caesar::ad {

// ---------------------------------------------------------------------------
// ParameterStore

template <class T>
Parameter<T>& ParameterStore<T>::add(std::string name, ParamGroup group, Matrix<T> init) {
  if (find(name) != nullptr) throw ArgumentError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter<T>>();
  p->name = std::move(name);
  p->group = group;
  p->value = std::move(init);
  p->zero_grad();
  params_.push_back(std::move(p));
  return *params_.back();
}

template <class T>
Parameter<T>* ParameterStore<T>::find(std::string_view name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

template <class T>
const Parameter<T>* ParameterStore<T>::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

template <class T>
Parameter<T>& ParameterStore<T>::at(std::string_view name) {
  auto* p = find(name);
  if (p == nullptr) throw ArgumentError("unknown parameter: " + std::string(name));
  return *p;
}

template <class T>
const Parameter<T>& ParameterStore<T>::at(std::string_view name) const {
  const auto* p = find(name);
  if (p == nullptr) throw ArgumentError("unknown parameter: " + std::string(name));
  return *p;
}

template <class T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <class T>
std::size_t ParameterStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

// ---------------------------------------------------------------------------
// Tape

template <class T>
Var Tape<T>::constant(Matrix<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <class T>
Var Tape<T>::input(Matrix<T> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <class T>
Var Tape<T>::param(Parameter<T>& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <class T>
Matrix<T> Tape<T>::grad(Var v) const {
  const Node& n = nodes_[check(v)];
  if (n.grad.size() == 0) return Matrix<T>::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

template <class T>
Matrix<T>& Tape<T>::grad_buffer(Var v) {
  Node& n = nodes_[check(v)];
  if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
  return n.grad;
}

template <class T>
Var Tape<T>::record(Matrix<T> value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(fn));
}

template <class T>
Var Tape<T>::record(Matrix<T> value, std::span<const Var> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (Var p : parents) n.requires_grad = n.requires_grad || nodes_[check(p)].requires_grad;
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <class T>
void Tape<T>::backward(Var root) {
  const std::size_t r = check(root);
  if (nodes_[r].value.rows() != 1 || nodes_[r].value.cols() != 1)
    throw ArgumentError("backward root must be a 1x1 value");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[r].grad = Matrix<T>::Ones(1, 1);
  for (std::size_t i = r + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, Var{static_cast<std::int32_t>(i)});
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr || n.grad.size() == 0) continue;
    if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols())
      n.param->zero_grad();
    n.param->grad += n.grad;
  }
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw ArgumentError(what);
}

template <class T>
void require_same_shape(const Tape<T>& t, Var a, Var b, const char* op) {
  if (t.rows(a) != t.rows(b) || t.cols(a) != t.cols(b))
    throw ArgumentError(std::string(op) + ": shape mismatch");
}

Index reflect(Index i, Index n) {
  if (n == 1) return 0;
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <class T>
struct Vec256Of;
template <>
struct Vec256Of<float> {
  typedef float type __attribute__((vector_size(32)));
};
template <>
struct Vec256Of<double> {
  typedef double type __attribute__((vector_size(32)));
};
template <class T>
using Vec256 = typename Vec256Of<T>::type;

template <class T>
inline Vec256<T> load256(const T* p) {
  Vec256<T> v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

/// R rows x two 256-bit column vectors of a * b, accumulated in registers.
template <class T, int R>
inline void product_tile(const T* a, Index inner, const T* b, Index ldb, T* c, Index ldc) {
  constexpr int P = 32 / sizeof(T);
  Vec256<T> lo[R], hi[R];
  for (int r = 0; r < R; ++r) lo[r] = hi[r] = Vec256<T>{};
  for (Index k = 0; k < inner; ++k) {
    const Vec256<T> b0 = load256(b + k * ldb), b1 = load256(b + k * ldb + P);
    for (int r = 0; r < R; ++r) {
      const T s = a[r * inner + k];
      lo[r] += s * b0;
      hi[r] += s * b1;
    }
  }
  for (int r = 0; r < R; ++r) {
    std::memcpy(c + r * ldc, &lo[r], sizeof lo[r]);
    std::memcpy(c + r * ldc + P, &hi[r], sizeof hi[r]);
  }
}

/// Columns past the last full tile, one scalar at a time.
template <class T, int R>
inline void product_edge(const T* a, Index inner, const T* b, Index ldb, T* c, Index ldc, Index w) {
  for (int r = 0; r < R; ++r)
    for (Index j = 0; j < w; ++j) {
      T acc = 0;
      for (Index k = 0; k < inner; ++k) acc += a[r * inner + k] * b[k * ldb + j];
      c[r * ldc + j] = acc;
    }
}

template <class T, int R>
void product_rows(const T* a, Index inner, const T* b, Index cols, T* c) {
  constexpr Index W = 64 / sizeof(T);
  Index j = 0;
  for (; j + W <= cols; j += W) product_tile<T, R>(a, inner, b + j, cols, c + j, cols);
  if (j < cols) product_edge<T, R>(a, inner, b + j, cols, c + j, cols, cols - j);
}

/// out = a * b where every output entry is accumulated over k in the same
/// order no matter how many rows the product has. Eigen switches kernels
/// with the matrix size, which would make a ray's result depend on its batch.
template <class T>
void row_stable_product(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  const Index rows = a.rows(), inner = a.cols(), cols = b.cols();
  out.resize(rows, cols);
  Index i = 0;
  for (; i + 4 <= rows; i += 4) product_rows<T, 4>(a.data() + i * inner, inner, b.data(), cols, out.data() + i * cols);
  for (; i < rows; ++i) product_rows<T, 1>(a.data() + i * inner, inner, b.data(), cols, out.data() + i * cols);
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
  require(t.cols(a) == t.rows(b), "matmul: inner dimension mismatch");
  Matrix<T> out;
  row_stable_product(t.value(a), t.value(b), out);
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    if (tp.requires_grad(a)) tp.grad_buffer(a).noalias() += g * tp.value(b).transpose();
    if (tp.requires_grad(b)) tp.grad_buffer(b).noalias() += tp.value(a).transpose() * g;
  });
}

template <class T>
Var linear(Tape<T>& t, Var x, Var w, Var b) {
  require(t.cols(x) == t.rows(w), "linear: input width does not match weight rows");
  Matrix<T> out;
  row_stable_product(t.value(x), t.value(w), out);
  if (b.valid()) {
    require(t.rows(b) == 1 && t.cols(b) == t.cols(w), "linear: bias shape mismatch");
    out.rowwise() += t.value(b).row(0);
  }
  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return t.record(std::move(out), parents, [x, w, b](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    if (tp.requires_grad(x)) tp.grad_buffer(x).noalias() += g * tp.value(w).transpose();
    if (tp.requires_grad(w)) tp.grad_buffer(w).noalias() += tp.value(x).transpose() * g;
    if (b.valid() && tp.requires_grad(b)) tp.grad_buffer(b) += g.colwise().sum();
  });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  require_same_shape(t, a, b, "add");
  Matrix<T> out = t.value(a) + t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    if (tp.requires_grad(a)) tp.grad_buffer(a) += g;
    if (tp.requires_grad(b)) tp.grad_buffer(b) += g;
  });
}

template <class T>
Var sub(Tape<T>& t, Var a, Var b) {
  require_same_shape(t, a, b, "sub");
  Matrix<T> out = t.value(a) - t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    if (tp.requires_grad(a)) tp.grad_buffer(a) += g;
    if (tp.requires_grad(b)) tp.grad_buffer(b) -= g;
  });
}

template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
  require_same_shape(t, a, b, "mul");
  Matrix<T> out = t.value(a).cwiseProduct(t.value(b));
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    if (tp.requires_grad(a)) tp.grad_buffer(a) += g.cwiseProduct(tp.value(b));
    if (tp.requires_grad(b)) tp.grad_buffer(b) += g.cwiseProduct(tp.value(a));
  });
}

template <class T>
Var scale(Tape<T>& t, Var a, T s) {
  Matrix<T> out = t.value(a) * s;
  return t.record(std::move(out), {a}, [a, s](Tape<T>& tp, Var self) {
    tp.grad_buffer(a) += tp.upstream(self) * s;
  });
}

template <class T>
Var add_row(Tape<T>& t, Var a, Var row) {
  require(t.rows(row) == 1 && t.cols(row) == t.cols(a), "add_row: row shape mismatch");
  Matrix<T> out = t.value(a);
  out.rowwise() += t.value(row).row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    if (tp.requires_grad(a)) tp.grad_buffer(a) += g;
    if (tp.requires_grad(row)) tp.grad_buffer(row) += g.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

template <class T>
Var gelu(Tape<T>& t, Var a) {
  const auto x = t.value(a).array();
  const T c = T(kGeluC), k = T(kGeluA);
  const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> th =
      (c * (x + k * x.cube())).tanh();
  Matrix<T> out = (T(0.5) * x * (T(1) + th)).matrix();
  Matrix<T> slope;
  if (t.requires_grad(a))
    slope = (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th.square()) * c * (T(1) + T(3) * k * x.square()))
          .matrix();
  return t.record(std::move(out), {a}, [a, slope = std::move(slope)](Tape<T>& tp, Var self) {
    tp.grad_buffer(a) += tp.upstream(self).cwiseProduct(slope);
  });
}

template <class T>
Var sigmoid(Tape<T>& t, Var a) {
  Matrix<T> out = t.value(a).unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, Var self) {
    const auto& s = tp.value(self);
    tp.grad_buffer(a) +=
        tp.upstream(self).cwiseProduct(s.cwiseProduct((T(1) - s.array()).matrix()));
  });
}

template <class T>
Var abs(Tape<T>& t, Var a) {
  Matrix<T> out = t.value(a).cwiseAbs();
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, Var self) {
    const auto& x = tp.value(a);
    Matrix<T> sign = x.unaryExpr([](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
    tp.grad_buffer(a) += tp.upstream(self).cwiseProduct(sign);
  });
}

template <class T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, T eps) {
  const Index n = t.rows(x), d = t.cols(x);
  require(t.rows(gain) == 1 && t.cols(gain) == d, "layer_norm: gain shape mismatch");
  require(t.rows(bias) == 1 && t.cols(bias) == d, "layer_norm: bias shape mismatch");
  const auto& xv = t.value(x);
  Matrix<T> xhat(n, d);
  std::vector<T> inv_std(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (xv.row(r).array() - mean) * is;
  }
  Matrix<T> out = xhat.array().rowwise() * t.value(gain).row(0).array();
  out.rowwise() += t.value(bias).row(0);
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape<T>& tp, Var self) {
                    const auto& g = tp.upstream(self);
                    if (tp.requires_grad(gain))
                      tp.grad_buffer(gain) += g.cwiseProduct(xhat).colwise().sum();
                    if (tp.requires_grad(bias)) tp.grad_buffer(bias) += g.colwise().sum();
                    if (!tp.requires_grad(x)) return;
                    auto& gx = tp.grad_buffer(x);
                    const auto gv = tp.value(gain).row(0).array();
                    const Index d = xhat.cols();
                    for (Index r = 0; r < xhat.rows(); ++r) {
                      const Eigen::Array<T, 1, Eigen::Dynamic> dxh = g.row(r).array() * gv;
                      const T m1 = dxh.sum() / T(d);
                      const T m2 = (dxh * xhat.row(r).array()).sum() / T(d);
                      gx.row(r).array() += inv_std[static_cast<std::size_t>(r)] *
                                           (dxh - m1 - xhat.row(r).array() * m2);
                    }
                  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var concat_cols(Tape<T>& t, std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Index n = t.rows(parts[0]);
  Index total = 0;
  for (Var p : parts) {
    require(t.rows(p) == n, "concat_cols: row count mismatch");
    total += t.cols(p);
  }
  Matrix<T> out(n, total);
  Index off = 0;
  for (Var p : parts) {
    out.middleCols(off, t.cols(p)) = t.value(p);
    off += t.cols(p);
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [ps](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    Index off = 0;
    for (Var p : ps) {
      const Index c = tp.cols(p);
      if (tp.requires_grad(p)) tp.grad_buffer(p) += g.middleCols(off, c);
      off += c;
    }
  });
}

template <class T>
Var concat_rows(Tape<T>& t, std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const Index c = t.cols(parts[0]);
  Index total = 0;
  for (Var p : parts) {
    require(t.cols(p) == c, "concat_rows: column count mismatch");
    total += t.rows(p);
  }
  Matrix<T> out(total, c);
  Index off = 0;
  for (Var p : parts) {
    out.middleRows(off, t.rows(p)) = t.value(p);
    off += t.rows(p);
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [ps](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    Index off = 0;
    for (Var p : ps) {
      const Index r = tp.rows(p);
      if (tp.requires_grad(p)) tp.grad_buffer(p) += g.middleRows(off, r);
      off += r;
    }
  });
}

template <class T>
Var slice_cols(Tape<T>& t, Var a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= t.cols(a), "slice_cols: out of range");
  Matrix<T> out = t.value(a).middleCols(start, count);
  return t.record(std::move(out), {a}, [a, start, count](Tape<T>& tp, Var self) {
    tp.grad_buffer(a).middleCols(start, count) += tp.upstream(self);
  });
}

template <class T>
Var slice_rows(Tape<T>& t, Var a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= t.rows(a), "slice_rows: out of range");
  Matrix<T> out = t.value(a).middleRows(start, count);
  return t.record(std::move(out), {a}, [a, start, count](Tape<T>& tp, Var self) {
    tp.grad_buffer(a).middleRows(start, count) += tp.upstream(self);
  });
}

template <class T>
Var gather_rows(Tape<T>& t, Var a, std::vector<Index> indices) {
  const auto& av = t.value(a);
  Matrix<T> out(static_cast<Index>(indices.size()), av.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < av.rows(), "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = av.row(indices[i]);
  }
  return t.record(std::move(out), {a}, [a, idx = std::move(indices)](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Index>(i));
  });
}

template <class T>
Var repeat_row(Tape<T>& t, Var row, Index n) {
  require(t.rows(row) == 1, "repeat_row: input must have one row");
  Matrix<T> out = t.value(row).replicate(n, 1);
  return t.record(std::move(out), {row}, [row](Tape<T>& tp, Var self) {
    tp.grad_buffer(row) += tp.upstream(self).colwise().sum();
  });
}

template <class T>
Var segment_mean(Tape<T>& t, Var a, Index group) {
  const Index n = t.rows(a);
  require(group >= 1 && n >= 1 && n % group == 0, "segment_mean: rows not divisible by group");
  const Index segments = n / group;
  const auto& av = t.value(a);
  Matrix<T> out(segments, av.cols());
  for (Index s = 0; s < segments; ++s) out.row(s) = av.middleRows(s * group, group).colwise().mean();
  return t.record(std::move(out), {a}, [a, group](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    auto& ga = tp.grad_buffer(a);
    const T inv = T(1) / T(group);
    for (Index s = 0; s < g.rows(); ++s)
      ga.middleRows(s * group, group).rowwise() += g.row(s) * inv;
  });
}

template <class T>
Var mean_rows(Tape<T>& t, Var a) {
  return segment_mean(t, a, t.rows(a));
}

template <class T>
Var sum_all(Tape<T>& t, Var a) {
  Matrix<T> out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, Var self) {
    tp.grad_buffer(a).array() += tp.upstream(self)(0, 0);
  });
}

template <class T>
Var mean_all(Tape<T>& t, Var a) {
  const Index n = t.value(a).size();
  require(n > 0, "mean_all: empty input");
  Matrix<T> out(1, 1);
  out(0, 0) = t.value(a).sum() / T(n);
  return t.record(std::move(out), {a}, [a, n](Tape<T>& tp, Var self) {
    tp.grad_buffer(a).array() += tp.upstream(self)(0, 0) / T(n);
  });
}

template <class T>
Var mse(Tape<T>& t, Var a, Var b) {
  require_same_shape(t, a, b, "mse");
  const Index n = t.value(a).size();
  require(n > 0, "mse: empty input");
  Matrix<T> out(1, 1);
  out(0, 0) = (t.value(a) - t.value(b)).squaredNorm() / T(n);
  return t.record(std::move(out), {a, b}, [a, b, n](Tape<T>& tp, Var self) {
    const T s = T(2) * tp.upstream(self)(0, 0) / T(n);
    const Matrix<T> diff = tp.value(a) - tp.value(b);
    if (tp.requires_grad(a)) tp.grad_buffer(a) += s * diff;
    if (tp.requires_grad(b)) tp.grad_buffer(b) -= s * diff;
  });
}

// ---------------------------------------------------------------------------
// Sparse row mixing

template <class T>
Var sparse_combine(Tape<T>& t, Var a, SparseRows<T> rows) {
  const auto& av = t.value(a);
  const Index n = rows.rows();
  Matrix<T> out = Matrix<T>::Zero(n, av.cols());
  for (Index r = 0; r < n; ++r) {
    for (Index k = rows.offsets[r]; k < rows.offsets[r + 1]; ++k) {
      const Index src = rows.indices[static_cast<std::size_t>(k)];
      require(src >= 0 && src < av.rows(), "sparse_combine: index out of range");
      out.row(r) += rows.weights[static_cast<std::size_t>(k)] * av.row(src);
    }
  }
  return t.record(std::move(out), {a}, [a, rows = std::move(rows)](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    auto& ga = tp.grad_buffer(a);
    for (Index r = 0; r < rows.rows(); ++r)
      for (Index k = rows.offsets[r]; k < rows.offsets[r + 1]; ++k)
        ga.row(rows.indices[static_cast<std::size_t>(k)]) +=
            rows.weights[static_cast<std::size_t>(k)] * g.row(r);
  });
}

template <class T>
Var scatter_rows(Tape<T>& t, const Matrix<T>& base, Var rows, std::vector<Index> positions) {
  const auto& rv = t.value(rows);
  require(static_cast<Index>(positions.size()) == rv.rows(), "scatter_rows: position count mismatch");
  require(rv.cols() == base.cols(), "scatter_rows: column mismatch");
  Matrix<T> out = base;
  // Last writer owns a position; only it receives gradient.
  std::vector<Index> owner(static_cast<std::size_t>(base.rows()), -1);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    require(positions[i] >= 0 && positions[i] < base.rows(), "scatter_rows: position out of range");
    out.row(positions[i]) = rv.row(static_cast<Index>(i));
    owner[static_cast<std::size_t>(positions[i])] = static_cast<Index>(i);
  }
  return t.record(std::move(out), {rows},
                  [rows, pos = std::move(positions), owner = std::move(owner)](Tape<T>& tp,
                                                                               Var self) {
                    const auto& g = tp.upstream(self);
                    auto& gr = tp.grad_buffer(rows);
                    for (std::size_t i = 0; i < pos.size(); ++i)
                      if (owner[static_cast<std::size_t>(pos[i])] == static_cast<Index>(i))
                        gr.row(static_cast<Index>(i)) += g.row(pos[i]);
                  });
}

// ---------------------------------------------------------------------------
// Attention

template <class T>
Var block_attention(Tape<T>& t, Var q, Var k, Var v, Index heads, Index gq, Index gk,
                    std::vector<std::uint8_t> mask) {
  const auto& Q = t.value(q);
  const auto& K = t.value(k);
  const auto& V = t.value(v);
  require(heads >= 1 && gq >= 1 && gk >= 1, "block_attention: bad group sizes");
  require(Q.rows() % gq == 0, "block_attention: query rows not divisible by gq");
  const Index blocks = Q.rows() / gq;
  require(K.rows() == blocks * gk && V.rows() == blocks * gk,
          "block_attention: key/value rows do not match query blocks");
  require(Q.cols() == K.cols(), "block_attention: query/key width mismatch");
  require(Q.cols() % heads == 0 && V.cols() % heads == 0,
          "block_attention: width not divisible by heads");
  require(mask.empty() || static_cast<Index>(mask.size()) == K.rows(),
          "block_attention: mask size mismatch");
  const Index dh = Q.cols() / heads;
  const Index dv = V.cols() / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  using Block = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Block, 0, Eigen::OuterStride<>>;
  using MMap = Eigen::Map<Block, 0, Eigen::OuterStride<>>;
  const Index qc = Q.cols(), vc = V.cols();

  Matrix<T> out = Matrix<T>::Zero(Q.rows(), vc);
  // Softmax weights per (block, head), gq x gk each; masked keys get 0.
  std::vector<T> attn(static_cast<std::size_t>(blocks * heads * gq * gk), T(0));
  std::vector<std::uint8_t> empty(static_cast<std::size_t>(blocks * heads * gq), 0);
  Block logits(gq, gk);
  for (Index b = 0; b < blocks; ++b) {
    const std::uint8_t* mb = mask.empty() ? nullptr : mask.data() + b * gk;
    Index live = gk;
    if (mb != nullptr) live = std::count(mb, mb + gk, std::uint8_t{1});
    for (Index h = 0; h < heads; ++h) {
      const CMap qb(Q.data() + b * gq * qc + h * dh, gq, dh, Eigen::OuterStride<>(qc));
      const CMap kb(K.data() + b * gk * qc + h * dh, gk, dh, Eigen::OuterStride<>(qc));
      const CMap vb(V.data() + b * gk * vc + h * dv, gk, dv, Eigen::OuterStride<>(vc));
      Eigen::Map<Block> a(attn.data() + (b * heads + h) * gq * gk, gq, gk);
      if (live == 0) {
        std::fill(empty.begin() + (b * heads + h) * gq, empty.begin() + (b * heads + h + 1) * gq, 1);
        continue;
      }
      logits.noalias() = qb * kb.transpose();
      logits *= sc;
      for (Index i = 0; i < gq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Index j = 0; j < gk; ++j)
          if (mb == nullptr || mb[j] != 0) mx = std::max(mx, logits(i, j));
        T total = 0;
        for (Index j = 0; j < gk; ++j) {
          const T e = (mb == nullptr || mb[j] != 0) ? std::exp(logits(i, j) - mx) : T(0);
          a(i, j) = e;
          total += e;
        }
        a.row(i) /= total;
      }
      MMap ob(out.data() + b * gq * vc + h * dv, gq, dv, Eigen::OuterStride<>(vc));
      ob.noalias() = a * vb;
    }
  }

  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, heads, gq, gk, dh, dv, sc, blocks, attn = std::move(attn), empty = std::move(empty)](
          Tape<T>& tp, Var self) {
        const auto& G = tp.upstream(self);
        const auto& Q = tp.value(q);
        const auto& K = tp.value(k);
        const auto& V = tp.value(v);
        T* dQ = tp.requires_grad(q) ? tp.grad_buffer(q).data() : nullptr;
        T* dK = tp.requires_grad(k) ? tp.grad_buffer(k).data() : nullptr;
        T* dV = tp.requires_grad(v) ? tp.grad_buffer(v).data() : nullptr;
        const Index qc = Q.cols(), vc = V.cols();
        Block da(gq, gk);
        for (Index b = 0; b < blocks; ++b) {
          for (Index h = 0; h < heads; ++h) {
            if (empty[static_cast<std::size_t>((b * heads + h) * gq)]) continue;
            const Eigen::Map<const Block> a(attn.data() + (b * heads + h) * gq * gk, gq, gk);
            const CMap gb(G.data() + b * gq * vc + h * dv, gq, dv, Eigen::OuterStride<>(vc));
            const CMap vb(V.data() + b * gk * vc + h * dv, gk, dv, Eigen::OuterStride<>(vc));
            if (dV != nullptr) {
              MMap dvb(dV + b * gk * vc + h * dv, gk, dv, Eigen::OuterStride<>(vc));
              dvb.noalias() += a.transpose() * gb;
            }
            if (dQ == nullptr && dK == nullptr) continue;
            da.noalias() = gb * vb.transpose();
            for (Index i = 0; i < gq; ++i) {
              const T weighted = a.row(i).dot(da.row(i));
              da.row(i) = (a.row(i).array() * (da.row(i).array() - weighted) * sc).matrix();
            }
            if (dQ != nullptr) {
              const CMap kb(K.data() + b * gk * qc + h * dh, gk, dh, Eigen::OuterStride<>(qc));
              MMap dqb(dQ + b * gq * qc + h * dh, gq, dh, Eigen::OuterStride<>(qc));
              dqb.noalias() += da * kb;
            }
            if (dK != nullptr) {
              const CMap qb(Q.data() + b * gq * qc + h * dh, gq, dh, Eigen::OuterStride<>(qc));
              MMap dkb(dK + b * gk * qc + h * dh, gk, dh, Eigen::OuterStride<>(qc));
              dkb.noalias() += da.transpose() * qb;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution

template <class T>
Var conv3x3(Tape<T>& t, Var x, Index h, Index w, Var weight, Var bias, Index stride) {
  const auto& X = t.value(x);
  require(h >= 1 && w >= 1 && X.rows() == h * w, "conv3x3: input rows must equal h*w");
  require(stride >= 1, "conv3x3: stride must be positive");
  const Index cin = X.cols();
  require(t.rows(weight) == 9 * cin, "conv3x3: weight rows must be 9*cin");
  const Index cout = t.cols(weight);
  require(t.rows(bias) == 1 && t.cols(bias) == cout, "conv3x3: bias shape mismatch");
  const Index ho = conv_out_size(h, stride), wo = conv_out_size(w, stride);

  std::vector<Index> src(static_cast<std::size_t>(ho * wo * 9));
  Matrix<T> col(ho * wo, 9 * cin);
  for (Index oy = 0; oy < ho; ++oy)
    for (Index ox = 0; ox < wo; ++ox) {
      const Index o = oy * wo + ox;
      for (Index ky = 0; ky < 3; ++ky)
        for (Index kx = 0; kx < 3; ++kx) {
          const Index iy = reflect(oy * stride + ky - 1, h);
          const Index ix = reflect(ox * stride + kx - 1, w);
          const Index tap = ky * 3 + kx;
          src[static_cast<std::size_t>(o * 9 + tap)] = iy * w + ix;
          col.block(o, tap * cin, 1, cin) = X.row(iy * w + ix);
        }
    }
  Matrix<T> out(ho * wo, cout);
  out.noalias() = col * t.value(weight);
  out.rowwise() += t.value(bias).row(0);
  return t.record(std::move(out), {x, weight, bias},
                  [x, weight, bias, cin, col = std::move(col), src = std::move(src)](Tape<T>& tp,
                                                                                     Var self) {
                    const auto& g = tp.upstream(self);
                    if (tp.requires_grad(weight))
                      tp.grad_buffer(weight).noalias() += col.transpose() * g;
                    if (tp.requires_grad(bias)) tp.grad_buffer(bias) += g.colwise().sum();
                    if (!tp.requires_grad(x)) return;
                    const Matrix<T> dcol = g * tp.value(weight).transpose();
                    auto& gx = tp.grad_buffer(x);
                    for (Index o = 0; o < dcol.rows(); ++o)
                      for (Index tap = 0; tap < 9; ++tap)
                        gx.row(src[static_cast<std::size_t>(o * 9 + tap)]) +=
                            dcol.block(o, tap * cin, 1, cin);
                  });
}

// ---------------------------------------------------------------------------
// Triplet rotation

template <class T>
Var rotate_triplets(Tape<T>& t, Var x, std::vector<Eigen::Matrix<T, 3, 3>> rotations) {
  const auto& X = t.value(x);
  require(X.cols() % 3 == 0, "rotate_triplets: width must be divisible by 3");
  require(static_cast<Index>(rotations.size()) == X.rows(),
          "rotate_triplets: one rotation per row required");
  Matrix<T> out(X.rows(), X.cols());
  for (Index r = 0; r < X.rows(); ++r)
    for (Index j = 0; j < X.cols() / 3; ++j) {
      const Eigen::Matrix<T, 3, 1> col = X.row(r).segment(3 * j, 3).transpose();
      out.row(r).segment(3 * j, 3) = (rotations[static_cast<std::size_t>(r)] * col).transpose();
    }
  return t.record(std::move(out), {x}, [x, rot = std::move(rotations)](Tape<T>& tp, Var self) {
    const auto& g = tp.upstream(self);
    auto& gx = tp.grad_buffer(x);
    for (Index r = 0; r < g.rows(); ++r)
      for (Index j = 0; j < g.cols() / 3; ++j) {
        const Eigen::Matrix<T, 3, 1> gc = g.row(r).segment(3 * j, 3).transpose();
        gx.row(r).segment(3 * j, 3) += (rot[static_cast<std::size_t>(r)].transpose() * gc).transpose();
      }
  });
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define CAESAR_AD_INSTANTIATE(T)                                                              \
  template struct Parameter<T>;                                                                \
  template class ParameterStore<T>;                                                            \
  template class Tape<T>;                                                                      \
  template Var matmul<T>(Tape<T>&, Var, Var);                                                  \
  template Var linear<T>(Tape<T>&, Var, Var, Var);                                             \
  template Var add<T>(Tape<T>&, Var, Var);                                                     \
  template Var sub<T>(Tape<T>&, Var, Var);                                                     \
  template Var mul<T>(Tape<T>&, Var, Var);                                                     \
  template Var scale<T>(Tape<T>&, Var, T);                                                     \
  template Var add_row<T>(Tape<T>&, Var, Var);                                                 \
  template Var gelu<T>(Tape<T>&, Var);                                                         \
  template Var sigmoid<T>(Tape<T>&, Var);                                                      \
  template Var abs<T>(Tape<T>&, Var);                                                          \
  template Var layer_norm<T>(Tape<T>&, Var, Var, Var, T);                                      \
  template Var concat_cols<T>(Tape<T>&, std::span<const Var>);                                 \
  template Var concat_rows<T>(Tape<T>&, std::span<const Var>);                                 \
  template Var slice_cols<T>(Tape<T>&, Var, Index, Index);                                     \
  template Var slice_rows<T>(Tape<T>&, Var, Index, Index);                                     \
  template Var gather_rows<T>(Tape<T>&, Var, std::vector<Index>);                              \
  template Var repeat_row<T>(Tape<T>&, Var, Index);                                            \
  template Var segment_mean<T>(Tape<T>&, Var, Index);                                          \
  template Var mean_rows<T>(Tape<T>&, Var);                                                    \
  template Var sum_all<T>(Tape<T>&, Var);                                                      \
  template Var mean_all<T>(Tape<T>&, Var);                                                     \
  template Var mse<T>(Tape<T>&, Var, Var);                                                     \
  template Var sparse_combine<T>(Tape<T>&, Var, SparseRows<T>);                                \
  template Var scatter_rows<T>(Tape<T>&, const Matrix<T>&, Var, std::vector<Index>);           \
  template Var block_attention<T>(Tape<T>&, Var, Var, Var, Index, Index, Index,                \
                                  std::vector<std::uint8_t>);                                  \
  template Var conv3x3<T>(Tape<T>&, Var, Index, Index, Var, Var, Index);                       \
  template Var rotate_triplets<T>(Tape<T>&, Var, std::vector<Eigen::Matrix<T, 3, 3>>);

CAESAR_AD_INSTANTIATE(float)
CAESAR_AD_INSTANTIATE(double)

}  // namespace caesar::ad
