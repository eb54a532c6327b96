#pragma once

// Reverse-mode automatic differentiation over row-major matrices.
//
// A Tape records every operation of one forward pass. Values are dense
// matrices (one batch item per row). backward() walks the tape in reverse
// and accumulates gradients into inputs and into the Parameter objects that
// were bound with Tape::param().

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "caesar/errors.hpp"
#include "caesar/tensor.hpp"

namespace caesar::ad {

/// Optimizer parameter groups; each group gets its own learning rate.
enum class ParamGroup { encoder, rest };

template <class T>
struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::rest;
  Matrix<T> value;
  Matrix<T> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Owns parameters with stable addresses, in registration order.
template <class T>
class ParameterStore {
 public:
  Parameter<T>& add(std::string name, ParamGroup group, Matrix<T> init);

  Parameter<T>* find(std::string_view name);
  const Parameter<T>* find(std::string_view name) const;
  Parameter<T>& at(std::string_view name);
  const Parameter<T>& at(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

/// Weights drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Matrix<T> uniform_fan_in(std::mt19937_64& rng, Index rows, Index cols, Index fan_in) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(bound * unit(rng));
  return m;
}

/// Handle to a node on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// CSR description of output rows as weighted sums of input rows.
template <class T>
struct SparseRows {
  std::vector<Index> offsets{0};
  std::vector<Index> indices;
  std::vector<T> weights;

  Index rows() const { return static_cast<Index>(offsets.size()) - 1; }
  void add(Index index, T weight) {
    indices.push_back(index);
    weights.push_back(weight);
  }
  void finish_row() { offsets.push_back(static_cast<Index>(indices.size())); }
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var self)>;

  Tape() = default;
  /// With grad_enabled = false nothing is recorded for backward().
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf without gradient.
  Var constant(Matrix<T> value);
  /// Differentiable leaf; its gradient is readable after backward().
  Var input(Matrix<T> value);
  /// Differentiable leaf bound to a parameter; backward() adds into p.grad.
  Var param(Parameter<T>& p);

  const Matrix<T>& value(Var v) const { return nodes_[check(v)].value; }
  /// Gradient of the last backward() root; zero matrix if none reached v.
  Matrix<T> grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
  Index rows(Var v) const { return value(v).rows(); }
  Index cols(Var v) const { return value(v).cols(); }
  std::size_t size() const { return nodes_.size(); }

  /// Back-propagates from a 1x1 root.
  void backward(Var root);

  // Op authoring.
  Var record(Matrix<T> value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Matrix<T> value, std::span<const Var> parents, BackwardFn fn);
  /// Gradient flowing into `self` during backward().
  const Matrix<T>& upstream(Var self) const { return nodes_[check(self)].grad; }
  /// Mutable gradient buffer of v, zero-initialized on first access.
  Matrix<T>& grad_buffer(Var v);

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  std::size_t check(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ArgumentError("invalid tape variable");
    return static_cast<std::size_t>(v.id);
  }

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Operations. Shapes are checked; mismatches raise ArgumentError.

template <class T> Var matmul(Tape<T>& t, Var a, Var b);
/// x * w + b, with b a 1 x out row broadcast over rows (b may be invalid).
template <class T> Var linear(Tape<T>& t, Var x, Var w, Var b = {});
template <class T> Var add(Tape<T>& t, Var a, Var b);
template <class T> Var sub(Tape<T>& t, Var a, Var b);
template <class T> Var mul(Tape<T>& t, Var a, Var b);
template <class T> Var scale(Tape<T>& t, Var a, T s);
/// a + row, row being 1 x cols(a).
template <class T> Var add_row(Tape<T>& t, Var a, Var row);

template <class T> Var gelu(Tape<T>& t, Var a);
template <class T> Var sigmoid(Tape<T>& t, Var a);
template <class T> Var abs(Tape<T>& t, Var a);
/// Row-wise layer normalization with learned gain and bias (1 x cols).
template <class T> Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, T eps = T(1e-5));

template <class T> Var concat_cols(Tape<T>& t, std::span<const Var> parts);
template <class T> Var concat_rows(Tape<T>& t, std::span<const Var> parts);
template <class T> Var slice_cols(Tape<T>& t, Var a, Index start, Index count);
template <class T> Var slice_rows(Tape<T>& t, Var a, Index start, Index count);
/// out.row(i) = a.row(indices[i]); backward scatter-adds.
template <class T> Var gather_rows(Tape<T>& t, Var a, std::vector<Index> indices);
/// Broadcast a 1 x c row to n rows.
template <class T> Var repeat_row(Tape<T>& t, Var row, Index n);
/// Mean over consecutive groups of `group` rows.
template <class T> Var segment_mean(Tape<T>& t, Var a, Index group);
template <class T> Var mean_rows(Tape<T>& t, Var a);
template <class T> Var sum_all(Tape<T>& t, Var a);
template <class T> Var mean_all(Tape<T>& t, Var a);
/// Mean squared difference over all entries.
template <class T> Var mse(Tape<T>& t, Var a, Var b);

/// out.row(r) = sum_k weights[k] * a.row(indices[k]) over the CSR row r.
template <class T> Var sparse_combine(Tape<T>& t, Var a, SparseRows<T> rows);
/// Copy of `base` with rows[positions[i]] replaced by rows(i). Gradient
/// flows only into `rows`.
template <class T> Var scatter_rows(Tape<T>& t, const Matrix<T>& base, Var rows,
                                    std::vector<Index> positions);

/// Grouped multi-head scaled dot-product attention.
///
/// Block b owns query rows [b*gq, (b+1)*gq) and key/value rows
/// [b*gk, (b+1)*gk). Each query attends only to its block's keys. `mask`
/// (empty or one byte per key row) removes keys from the softmax; a query
/// whose keys are all masked produces a zero row.
template <class T> Var block_attention(Tape<T>& t, Var q, Var k, Var v, Index heads, Index gq,
                                       Index gk, std::vector<std::uint8_t> mask = {});

/// 3x3 convolution with reflect padding of 1 and the given stride.
/// x is (h*w) x cin, weight is (9*cin) x cout, bias 1 x cout.
template <class T> Var conv3x3(Tape<T>& t, Var x, Index h, Index w, Var weight, Var bias,
                               Index stride);
/// Output spatial size of conv3x3.
inline Index conv_out_size(Index n, Index stride) { return (n + stride - 1) / stride; }

/// Rotates each consecutive triplet of every row: row n is reshaped to
/// 3 x (c/3) (triplets as columns), left-multiplied by rotations[n] and
/// flattened back.
template <class T> Var rotate_triplets(Tape<T>& t, Var x,
                                       std::vector<Eigen::Matrix<T, 3, 3>> rotations);

}  // namespace caesar::ad
