#pragma once

// Scene-level semantics: rotation calibration of per-view semantic vectors,
// calibrated/uncalibrated aggregation, global-local concatenation, the
// sequential refinement blocks and the central loss.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "caesar/autodiff.hpp"
#include "caesar/geometry.hpp"

namespace caesar::core {

/// 3 x (C/3) view of a semantic vector; column j holds entries 3j..3j+2.
template <class T>
using Triplets = Eigen::Matrix<T, 3, Eigen::Dynamic>;

template <class T>
Triplets<T> unflatten(const RowVector<T>& s);
template <class T>
RowVector<T> flatten(const Triplets<T>& m);

/// flatten(rotation * unflatten(s)).
template <class T>
RowVector<T> calibrate(const RowVector<T>& s, const geometry::RotationMatrix& rotation);

/// Arithmetic mean of the rows; throws on an empty list or ragged lengths.
template <class T>
RowVector<T> aggregate_calibrated(const std::vector<RowVector<T>>& per_view);
template <class T>
RowVector<T> aggregate_uncalibrated(const std::vector<RowVector<T>>& per_view);

template <class T>
RowVector<T> concat_global_local(const RowVector<T>& fused_pixel, const RowVector<T>& semantic);

/// (1/N) sum_n |per_view[n] - aggregate|_1.
template <class T>
T central_loss(const std::vector<RowVector<T>>& per_view, const RowVector<T>& aggregate);

template <class T>
struct CalibratedSemantic {
  std::vector<RowVector<T>> per_view;
  RowVector<T> aggregate;

  /// Calibrates each view with its relative rotation and averages.
  static CalibratedSemantic make(const std::vector<RowVector<T>>& originals,
                                 const std::vector<geometry::RotationMatrix>& rotations);
};

/// Relative rotations target * reference^T cast to T, one per reference.
template <class T>
std::vector<Eigen::Matrix<T, 3, 3>> relative_rotations(const geometry::Pose& target,
                                                       const std::vector<geometry::Pose>& references);

// Tape forms -----------------------------------------------------------------

/// Row n of `per_view` (N x C) calibrated with rotations[n].
template <class T>
ad::Var calibrate(ad::Tape<T>& tape, ad::Var per_view, std::vector<Eigen::Matrix<T, 3, 3>> rotations);
template <class T>
ad::Var central_loss(ad::Tape<T>& tape, ad::Var per_view, ad::Var aggregate);

// Sequential refinement --------------------------------------------------------

enum class CrossAttentionMode {
  joint,         // one attention over the N reference tokens
  per_view_sum,  // N single-token attentions, summed
};

struct RefinementConfig {
  int semantic_dim = 96;
  int heads = 4;
  CrossAttentionMode mode = CrossAttentionMode::joint;

  void validate() const;
};

/// One cross-attention block producing the residual between two stages.
template <class T>
class RefinementBlock {
 public:
  RefinementBlock(const RefinementConfig& config, ad::ParameterStore<T>& store, const std::string& prefix,
                  std::mt19937_64& rng);

  /// W_o * CrossAttention(query = current (1 x C), keys/values = originals (N x C)).
  ad::Var delta(ad::Tape<T>& tape, ad::Var current, ad::Var originals) const;

  ad::Parameter<T>& query_weight() const { return *wq_; }
  ad::Parameter<T>& key_weight() const { return *wk_; }
  ad::Parameter<T>& value_weight() const { return *wv_; }
  ad::Parameter<T>& value_bias() const { return *bv_; }
  ad::Parameter<T>& output_weight() const { return *wo_; }
  ad::Parameter<T>& output_bias() const { return *bo_; }

 private:
  RefinementConfig config_;
  ad::Parameter<T>* wq_;
  ad::Parameter<T>* bq_;
  ad::Parameter<T>* wk_;
  ad::Parameter<T>* bk_;
  ad::Parameter<T>* wv_;
  ad::Parameter<T>* bv_;
  ad::Parameter<T>* wo_;
  ad::Parameter<T>* bo_;
};

/// K - 1 independent blocks, block k maps stage k to stage k + 1.
template <class T>
class SemanticRefiner {
 public:
  SemanticRefiner(const RefinementConfig& config, int stages, ad::ParameterStore<T>& store,
                  const std::string& prefix, std::mt19937_64& rng);

  int stages() const { return stages_; }
  const RefinementBlock<T>& block(int k) const { return blocks_.at(static_cast<std::size_t>(k)); }

 private:
  int stages_;
  std::vector<RefinementBlock<T>> blocks_;
};

template <class T>
struct RefinementState {
  int stage = 0;
  RowVector<T> current;  // semantic vector at `stage`
  Matrix<T> originals;   // uncalibrated per-view vectors, N x C
  const SemanticRefiner<T>* refiner = nullptr;
};

/// current += delta(stage); stage += 1. Throws StateError past the last stage.
template <class T>
RefinementState<T> refine_step(const RefinementState<T>& state);

/// Semantic inputs for each transformer stage, built on a tape.
struct SemanticStages {
  std::vector<ad::Var> per_stage;  // K vars, each 1 x C
  ad::Var per_view;                // N x C, calibrated when enabled
  ad::Var aggregate;               // 1 x C, stage-0 semantic
  ad::Var central;                 // 1 x 1
};

struct SemanticOptions {
  bool calibrate = true;
  bool refine = true;
};

/// Calibrates (optionally), averages, applies the central loss and unrolls
/// the refinement (optionally) to K per-stage vectors.
template <class T>
SemanticStages build_semantic_stages(ad::Tape<T>& tape, ad::Var originals,
                                     std::vector<Eigen::Matrix<T, 3, 3>> rotations,
                                     const SemanticOptions& options, const SemanticRefiner<T>* refiner,
                                     int stages);

}  // namespace caesar::core
