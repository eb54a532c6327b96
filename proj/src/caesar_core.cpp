#include "caesar/caesar_core.hpp"

#include <algorithm>
#include <cmath>

namespace caesar::core {

template <class T>
Triplets<T> unflatten(const RowVector<T>& s) {
  if (s.size() == 0 || s.size() % 3 != 0)
    throw ArgumentError("unflatten: length " + std::to_string(s.size()) + " is not a positive multiple of 3");
  Triplets<T> m(3, s.size() / 3);
  for (Index j = 0; j < m.cols(); ++j)
    for (Index r = 0; r < 3; ++r) m(r, j) = s(3 * j + r);
  return m;
}

template <class T>
RowVector<T> flatten(const Triplets<T>& m) {
  RowVector<T> s(3 * m.cols());
  for (Index j = 0; j < m.cols(); ++j)
    for (Index r = 0; r < 3; ++r) s(3 * j + r) = m(r, j);
  return s;
}

template <class T>
RowVector<T> calibrate(const RowVector<T>& s, const geometry::RotationMatrix& rotation) {
  const auto r = geometry::RotationMatrix::from_matrix(rotation.matrix());
  const Triplets<T> rotated = r.matrix().template cast<T>() * unflatten(s);
  return flatten<T>(rotated);
}

namespace {

template <class T>
RowVector<T> mean_of(const std::vector<RowVector<T>>& v) {
  if (v.empty()) throw ArgumentError("aggregate: no per-view vectors");
  const Index c = v.front().size();
  for (const auto& x : v)
    if (x.size() != c) throw ArgumentError("aggregate: per-view vectors differ in length");
  // Sorted summation makes the mean independent of input order bit for bit;
  // offsets from the minimum make the mean of identical values exact.
  RowVector<T> out(c);
  std::vector<T> column(v.size());
  for (Index j = 0; j < c; ++j) {
    for (std::size_t n = 0; n < v.size(); ++n) column[n] = v[n](j);
    std::sort(column.begin(), column.end());
    T sum = 0;
    for (T x : column) sum += x - column.front();
    out(j) = column.front() + sum / T(v.size());
  }
  return out;
}

}  // namespace

template <class T>
RowVector<T> aggregate_calibrated(const std::vector<RowVector<T>>& per_view) {
  return mean_of(per_view);
}

template <class T>
RowVector<T> aggregate_uncalibrated(const std::vector<RowVector<T>>& per_view) {
  return mean_of(per_view);
}

template <class T>
RowVector<T> concat_global_local(const RowVector<T>& fused_pixel, const RowVector<T>& semantic) {
  RowVector<T> e(fused_pixel.size() + semantic.size());
  e << fused_pixel, semantic;
  return e;
}

template <class T>
T central_loss(const std::vector<RowVector<T>>& per_view, const RowVector<T>& aggregate) {
  if (per_view.empty()) throw ArgumentError("central_loss: no per-view vectors");
  std::vector<T> distances;
  for (const auto& s : per_view) {
    if (s.size() != aggregate.size()) throw ArgumentError("central_loss: length mismatch");
    distances.push_back((s - aggregate).cwiseAbs().sum());
  }
  std::sort(distances.begin(), distances.end());
  T total = 0;
  for (T d : distances) total += d;
  return total / T(per_view.size());
}

template <class T>
CalibratedSemantic<T> CalibratedSemantic<T>::make(const std::vector<RowVector<T>>& originals,
                                                  const std::vector<geometry::RotationMatrix>& rotations) {
  if (originals.size() != rotations.size())
    throw ArgumentError("calibration: one rotation per view required");
  CalibratedSemantic<T> out;
  for (std::size_t n = 0; n < originals.size(); ++n) out.per_view.push_back(calibrate(originals[n], rotations[n]));
  out.aggregate = aggregate_calibrated(out.per_view);
  return out;
}

template <class T>
std::vector<Eigen::Matrix<T, 3, 3>> relative_rotations(const geometry::Pose& target,
                                                       const std::vector<geometry::Pose>& references) {
  std::vector<Eigen::Matrix<T, 3, 3>> out;
  for (const auto& ref : references)
    out.push_back(geometry::compose_relative_rotation(target, ref).matrix().template cast<T>());
  return out;
}

template <class T>
ad::Var calibrate(ad::Tape<T>& tape, ad::Var per_view, std::vector<Eigen::Matrix<T, 3, 3>> rotations) {
  return ad::rotate_triplets(tape, per_view, std::move(rotations));
}

template <class T>
ad::Var central_loss(ad::Tape<T>& tape, ad::Var per_view, ad::Var aggregate) {
  const Index n = tape.rows(per_view);
  if (n < 1) throw ArgumentError("central_loss: no per-view vectors");
  const ad::Var spread = ad::repeat_row(tape, aggregate, n);
  return ad::scale(tape, ad::sum_all(tape, ad::abs(tape, ad::sub(tape, per_view, spread))), T(1) / T(n));
}

// ---------------------------------------------------------------------------
// Refinement

void RefinementConfig::validate() const {
  if (semantic_dim < 1) throw ArgumentError("refinement semantic_dim must be >= 1");
  if (heads < 1 || semantic_dim % heads != 0)
    throw ArgumentError("refinement heads must divide semantic_dim");
}

template <class T>
RefinementBlock<T>::RefinementBlock(const RefinementConfig& config, ad::ParameterStore<T>& store,
                                    const std::string& prefix, std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  const Index c = config_.semantic_dim;
  const auto g = ad::ParamGroup::rest;
  wq_ = &store.add(prefix + ".query.weight", g, ad::uniform_fan_in<T>(rng, c, c, c));
  bq_ = &store.add(prefix + ".query.bias", g, Matrix<T>::Zero(1, c));
  wk_ = &store.add(prefix + ".key.weight", g, ad::uniform_fan_in<T>(rng, c, c, c));
  bk_ = &store.add(prefix + ".key.bias", g, Matrix<T>::Zero(1, c));
  wv_ = &store.add(prefix + ".value.weight", g, ad::uniform_fan_in<T>(rng, c, c, c));
  bv_ = &store.add(prefix + ".value.bias", g, Matrix<T>::Zero(1, c));
  wo_ = &store.add(prefix + ".out.weight", g, ad::uniform_fan_in<T>(rng, c, c, c));
  bo_ = &store.add(prefix + ".out.bias", g, Matrix<T>::Zero(1, c));
}

template <class T>
ad::Var RefinementBlock<T>::delta(ad::Tape<T>& tape, ad::Var current, ad::Var originals) const {
  if (tape.rows(current) != 1 || tape.cols(current) != config_.semantic_dim)
    throw ArgumentError("refinement: current semantic must be 1 x C");
  if (tape.cols(originals) != config_.semantic_dim) throw ArgumentError("refinement: originals must be N x C");
  const Index n = tape.rows(originals);
  const ad::Var v = ad::linear(tape, originals, tape.param(*wv_), tape.param(*bv_));
  ad::Var attended;
  if (config_.mode == CrossAttentionMode::joint) {
    const ad::Var q = ad::linear(tape, current, tape.param(*wq_), tape.param(*bq_));
    const ad::Var k = ad::linear(tape, originals, tape.param(*wk_), tape.param(*bk_));
    attended = ad::block_attention(tape, q, k, v, config_.heads, 1, n);
  } else {
    // A softmax over a single key is 1, so each per-view attention returns
    // that view's value.
    attended = ad::scale(tape, ad::mean_rows(tape, v), T(n));
  }
  return ad::linear(tape, attended, tape.param(*wo_), tape.param(*bo_));
}

template <class T>
SemanticRefiner<T>::SemanticRefiner(const RefinementConfig& config, int stages, ad::ParameterStore<T>& store,
                                    const std::string& prefix, std::mt19937_64& rng)
    : stages_(stages) {
  if (stages < 1) throw ArgumentError("refiner requires at least one stage");
  for (int k = 0; k + 1 < stages; ++k)
    blocks_.emplace_back(config, store, prefix + ".block" + std::to_string(k), rng);
}

template <class T>
RefinementState<T> refine_step(const RefinementState<T>& state) {
  if (state.refiner == nullptr) throw StateError("refine_step: no refiner attached");
  if (state.stage < 0 || state.stage >= state.refiner->stages() - 1)
    throw StateError("refine_step: stage " + std::to_string(state.stage) + " has no successor (K = " +
                     std::to_string(state.refiner->stages()) + ")");
  ad::Tape<T> tape;
  const ad::Var cur = tape.constant(state.current);
  const ad::Var orig = tape.constant(state.originals);
  const ad::Var d = state.refiner->block(state.stage).delta(tape, cur, orig);
  RefinementState<T> next = state;
  next.current = state.current + tape.value(d).row(0);
  next.stage = state.stage + 1;
  return next;
}

template <class T>
SemanticStages build_semantic_stages(ad::Tape<T>& tape, ad::Var originals,
                                     std::vector<Eigen::Matrix<T, 3, 3>> rotations,
                                     const SemanticOptions& options, const SemanticRefiner<T>* refiner,
                                     int stages) {
  if (stages < 1) throw ArgumentError("semantic stages must be >= 1");
  SemanticStages out;
  out.per_view = options.calibrate ? calibrate(tape, originals, std::move(rotations)) : originals;
  out.aggregate = ad::mean_rows(tape, out.per_view);
  out.central = central_loss(tape, out.per_view, out.aggregate);
  out.per_stage.push_back(out.aggregate);
  for (int k = 1; k < stages; ++k) {
    if (options.refine) {
      if (refiner == nullptr || refiner->stages() != stages)
        throw StateError("refinement enabled without a matching refiner");
      const ad::Var prev = out.per_stage.back();
      out.per_stage.push_back(ad::add(tape, prev, refiner->block(k - 1).delta(tape, prev, originals)));
    } else {
      out.per_stage.push_back(out.aggregate);
    }
  }
  return out;
}

#define CAESAR_CORE_INSTANTIATE(T)                                                                    \
  template Triplets<T> unflatten<T>(const RowVector<T>&);                                             \
  template RowVector<T> flatten<T>(const Triplets<T>&);                                               \
  template RowVector<T> calibrate<T>(const RowVector<T>&, const geometry::RotationMatrix&);           \
  template RowVector<T> aggregate_calibrated<T>(const std::vector<RowVector<T>>&);                    \
  template RowVector<T> aggregate_uncalibrated<T>(const std::vector<RowVector<T>>&);                  \
  template RowVector<T> concat_global_local<T>(const RowVector<T>&, const RowVector<T>&);             \
  template T central_loss<T>(const std::vector<RowVector<T>>&, const RowVector<T>&);                  \
  template struct CalibratedSemantic<T>;                                                              \
  template std::vector<Eigen::Matrix<T, 3, 3>> relative_rotations<T>(const geometry::Pose&,           \
                                                                     const std::vector<geometry::Pose>&); \
  template ad::Var calibrate<T>(ad::Tape<T>&, ad::Var, std::vector<Eigen::Matrix<T, 3, 3>>);          \
  template ad::Var central_loss<T>(ad::Tape<T>&, ad::Var, ad::Var);                                   \
  template class RefinementBlock<T>;                                                                  \
  template class SemanticRefiner<T>;                                                                  \
  template RefinementState<T> refine_step<T>(const RefinementState<T>&);                              \
  template SemanticStages build_semantic_stages<T>(ad::Tape<T>&, ad::Var,                             \
                                                   std::vector<Eigen::Matrix<T, 3, 3>>,               \
                                                   const SemanticOptions&, const SemanticRefiner<T>*, int);

CAESAR_CORE_INSTANTIATE(float)
CAESAR_CORE_INSTANTIATE(double)

}  // namespace caesar::core
