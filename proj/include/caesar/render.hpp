#pragma once

// Stacked view/ray transformers with global-local embeddings.
//
// For every stage k the sampled points of each ray are projected into all
// reference views, fused across views by the view transformer, augmented
// with the stage-k semantic vector, and mixed along the ray by the ray
// transformer. The last stage pools each ray with learned attention weights
// and maps the pooled token to RGB through an affine head and a sigmoid.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "caesar/autodiff.hpp"
#include "caesar/caesar_core.hpp"
#include "caesar/encoder.hpp"
#include "caesar/geometry.hpp"
#include "caesar/scene.hpp"

namespace caesar::render {

struct StackConfig {
  int stages = 4;  // K
  int heads = 4;
  int pixel_dim = 64;     // L, mirrors the encoder
  int semantic_dim = 96;  // C, mirrors the encoder
  int points_per_ray = 32;
  int ff_width = 128;
  int pos_freqs = 6;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SemanticConfig {
  bool enabled = true;
  bool calibrate = true;
  bool refine = true;
  int heads = 4;
  core::CrossAttentionMode mode = core::CrossAttentionMode::joint;
};

struct ModelConfig {
  encoder::EncoderConfig encoder;
  StackConfig stack;
  SemanticConfig semantic;

  /// Copies L and C from the encoder into the stack and validates all
  /// cross-module constraints (C divisible by 3 when calibrating).
  void finalize();
  void validate() const;
};

/// Width of the per-view geometric features: rgb (3), direction delta (3),
/// direction cosine (1).
inline constexpr int kViewFeatureDim = 7;
/// Width of sinusoidal encodings of a 3-vector: raw + sin/cos per frequency.
inline int encoding_dim(int freqs) { return 3 + 6 * freqs; }

template <class T>
struct Linear {
  ad::Parameter<T>* weight = nullptr;
  ad::Parameter<T>* bias = nullptr;  // optional

  static Linear make(ad::ParameterStore<T>& store, const std::string& name, int in, int out, bool with_bias,
                     std::mt19937_64& rng);
  ad::Var apply(ad::Tape<T>& tape, ad::Var x) const;
};

template <class T>
struct LayerNorm {
  ad::Parameter<T>* gain = nullptr;
  ad::Parameter<T>* bias = nullptr;

  static LayerNorm make(ad::ParameterStore<T>& store, const std::string& name, int dim);
  ad::Var apply(ad::Tape<T>& tape, ad::Var x) const;
};

/// h + W2 gelu(W1 LN(h)).
template <class T>
struct FeedForward {
  LayerNorm<T> norm;
  Linear<T> in;
  Linear<T> out;

  static FeedForward make(ad::ParameterStore<T>& store, const std::string& name, int dim, int width,
                          std::mt19937_64& rng);
  ad::Var apply(ad::Tape<T>& tape, ad::Var h) const;
};

/// Per-point, per-view inputs of a view transformer stage.
template <class T>
struct ViewInputs {
  ad::Var grid;              // stacked reference feature grids, G x L
  ad::SparseRows<T> taps;    // P*N rows of bilinear taps into `grid`
  ad::Var geometry;          // P*N x kViewFeatureDim
  ad::Var point_encoding;    // P x E
  std::vector<std::uint8_t> mask;  // P*N, 1 = projection inside the view
  Index views = 1;
};

/// Linear map of a per-view token [sampled feature, view geometry, point
/// encoding]. Sampling is linear, so the feature part is projected on the
/// grid before the bilinear taps are applied.
template <class T>
struct TokenProjection {
  Linear<T> feature;
  Linear<T> geometry;
  Linear<T> point;

  static TokenProjection make(ad::ParameterStore<T>& store, const std::string& name, const StackConfig& config,
                              std::mt19937_64& rng);
  ad::Var apply(ad::Tape<T>& tape, const ViewInputs<T>& in) const;
};

/// Attention of each point over its N reference-view tokens.
template <class T>
class ViewTransformer {
 public:
  ViewTransformer(const StackConfig& config, ad::ParameterStore<T>& store, const std::string& prefix,
                  std::mt19937_64& rng);

  /// Value projections of the per-view tokens (P*N x L).
  ad::Var values(ad::Tape<T>& tape, const ViewInputs<T>& in) const;
  /// Fused feature W_o * sum_n softmax_n(q . k_n) v_n for each point, with
  /// the query taken from the current point token. Rows whose views are all
  /// masked are zero.
  ad::Var view_transform(ad::Tape<T>& tape, const ViewInputs<T>& in, ad::Var current) const;
  /// current + view_transform, followed by the feed-forward sublayer.
  ad::Var apply(ad::Tape<T>& tape, ad::Var current, const ViewInputs<T>& in) const;

  ad::Parameter<T>& out_weight() const { return *o_.weight; }

 private:
  StackConfig config_;
  TokenProjection<T> key_, value_;
  LayerNorm<T> query_norm_;
  Linear<T> q_, o_;
  FeedForward<T> ff_;
};

/// Two-layer MLP over Concat(point token, semantic) back to L.
template <class T>
class SemanticAugment {
 public:
  SemanticAugment(const StackConfig& config, ad::ParameterStore<T>& store, const std::string& prefix,
                  std::mt19937_64& rng);

  /// tokens: P x L, semantic: 1 x C (broadcast to every point).
  ad::Var apply(ad::Tape<T>& tape, ad::Var tokens, ad::Var semantic) const;

  ad::Parameter<T>& hidden_weight() const { return *hidden_.weight; }  // (L+C) x (L+C)
  ad::Parameter<T>& hidden_bias() const { return *hidden_.bias; }
  ad::Parameter<T>& out_weight() const { return *out_.weight; }  // (L+C) x L
  ad::Parameter<T>& out_bias() const { return *out_.bias; }

 private:
  StackConfig config_;
  Linear<T> hidden_, out_;
};

/// Self-attention along each ray with depth-order positional encoding.
template <class T>
class RayTransformer {
 public:
  RayTransformer(const StackConfig& config, ad::ParameterStore<T>& store, const std::string& prefix,
                 std::mt19937_64& rng);

  /// tokens: (R*M) x L, ray-major; returns the same shape.
  ad::Var apply(ad::Tape<T>& tape, ad::Var tokens, Index points_per_ray) const;

 private:
  StackConfig config_;
  LayerNorm<T> norm_;
  Linear<T> q_, k_, v_, o_;
  FeedForward<T> ff_;
};

/// Sinusoidal encoding [x, sin(2^i x), cos(2^i x)] per component.
template <class T>
void encode_vector(const geometry::Vec3& x, int freqs, T* out);
/// M x L depth-order positional encoding.
template <class T>
Matrix<T> depth_encoding(Index points, Index dim);

struct ReferenceView {
  const scene::Image* image = nullptr;
  geometry::Camera camera;
};

/// Reference data bound to a tape.
template <class T>
struct ReferenceSet {
  struct Layout {
    Index row_offset = 0;
    int grid_width = 0;
    int grid_height = 0;
  };
  std::vector<ReferenceView> views;  // canonical order
  geometry::Camera target;
  ad::Var features;   // all feature grids stacked by rows
  ad::Var originals;  // N x C uncalibrated semantics (invalid when disabled)
  std::vector<Layout> layout;
  int stride = 1;
  std::optional<core::SemanticStages> semantics;
};

template <class T>
struct RenderHooks {
  /// Semantic vector (1 x C) consumed by stage k.
  std::function<void(int stage, const Matrix<T>& semantic)> on_stage_semantic;
  /// Point tokens after stage k's ray transformer.
  std::function<void(int stage, const Matrix<T>& tokens)> on_stage_tokens;
};

template <class T>
struct RenderOutput {
  ad::Var rgb;  // R x 3 in [0, 1]
  /// Points whose projections fell outside every reference view.
  std::vector<std::uint8_t> fallback;
};

struct RayPrediction {
  geometry::Vec3 rgb;
};

template <class T>
class CaesarModel {
 public:
  explicit CaesarModel(ModelConfig config);
  CaesarModel(const CaesarModel&) = delete;
  CaesarModel& operator=(const CaesarModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ad::ParameterStore<T>& parameters() { return store_; }
  const ad::ParameterStore<T>& parameters() const { return store_; }
  const encoder::Encoder<T>& encoder() const { return *encoder_; }
  const ViewTransformer<T>& view_transformer(int k) const { return view_.at(static_cast<std::size_t>(k)); }
  const SemanticAugment<T>& augment(int k) const { return augment_.at(static_cast<std::size_t>(k)); }
  const RayTransformer<T>& ray_transformer(int k) const { return ray_.at(static_cast<std::size_t>(k)); }
  const core::SemanticRefiner<T>* refiner() const { return refiner_.get(); }

  /// Encodes references (sorted into a canonical order) and builds the
  /// per-stage semantics for the target camera.
  ReferenceSet<T> prepare(ad::Tape<T>& tape, const geometry::Camera& target,
                          std::vector<ReferenceView> references) const;
  /// Copies a prepared set onto another tape as constants.
  ReferenceSet<T> rebind(ad::Tape<T>& to, const ad::Tape<T>& from, const ReferenceSet<T>& set) const;

  RenderOutput<T> render_rays(ad::Tape<T>& tape, const ReferenceSet<T>& refs,
                              const std::vector<geometry::Ray>& rays, const geometry::Sampling& sampling,
                              const RenderHooks<T>* hooks = nullptr) const;

 private:
  ModelConfig config_;
  ad::ParameterStore<T> store_;
  std::unique_ptr<encoder::Encoder<T>> encoder_;
  std::unique_ptr<core::SemanticRefiner<T>> refiner_;
  Linear<T> initial_;  // point encoding -> first point token
  std::vector<ViewTransformer<T>> view_;
  std::vector<SemanticAugment<T>> augment_;
  std::vector<RayTransformer<T>> ray_;
  LayerNorm<T> pool_norm_;
  ad::Parameter<T>* pool_query_ = nullptr;
  Linear<T> rgb_head_;
};

/// Single-ray convenience wrapper.
template <class T>
RayPrediction render_ray(const CaesarModel<T>& model, const geometry::Ray& ray,
                         const std::vector<ReferenceView>& references, const geometry::Camera& target);

/// Renders every pixel center of `target` in batches of `batch_size` rays.
template <class T>
scene::Image render_image(const CaesarModel<T>& model, const geometry::Camera& target,
                          const std::vector<ReferenceView>& references, double near, double far,
                          int batch_size);

/// Renders the listed pixel centers only (row = pixel index y * w + x).
template <class T>
Matrix<T> render_pixels(const CaesarModel<T>& model, const geometry::Camera& target,
                        const std::vector<ReferenceView>& references, double near, double far,
                        const std::vector<Index>& pixels, int batch_size);

}  // namespace caesar::render
