#pragma once

// Losses, optimizer loop, metrics and checkpoints.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "caesar/autodiff.hpp"
#include "caesar/render.hpp"
#include "caesar/scene.hpp"

namespace caesar::train {

enum class Precision { single, dbl };

struct TrainConfig {
  int iterations = 5000;
  int rays_per_iteration = 512;
  double lr_encoder = 0.001;
  double lr_rest = 0.0005;
  int halve_every = 2000;
  double lambda_central = 1.0;
  double lambda_perceptual = 0.001;
  int min_refs = 2;
  int max_refs = 4;
  /// Render training views from a reference set that contains the view
  /// itself (single-scene overfitting).
  bool include_target = false;
  /// Fraction of each view's pixels withheld from ray sampling.
  double holdout_fraction = 0.0;
  std::uint64_t seed = 0;
  Precision precision = Precision::single;

  void validate() const;
};

struct LossBreakdown {
  double mse = 0;
  double central = 0;
  double perceptual = 0;
  double total = 0;
  double lambda_central = 1.0;
  double lambda_perceptual = 0.001;
};

template <class T>
T mse_loss(const Matrix<T>& pred, const Matrix<T>& truth);

/// Fixed, seeded three-level convolutional pyramid used as the perceptual
/// feature extractor. Weights are constants, never trained.
template <class T>
class FeatureNet {
 public:
  explicit FeatureNet(std::uint64_t seed = 7, std::vector<int> channels = {8, 16, 32});

  /// Activations of every level for an (h*w) x 3 image.
  std::vector<ad::Var> features(ad::Tape<T>& tape, ad::Var image, Index h, Index w) const;
  std::size_t levels() const { return weights_.size(); }

 private:
  std::vector<Matrix<T>> weights_;
  std::vector<Matrix<T>> biases_;
};

/// Mean squared feature distance (summed over levels) between the truth
/// image and a copy with `pred` written at `positions` (row = y * w + x).
template <class T>
ad::Var perceptual_loss(ad::Tape<T>& tape, ad::Var pred, const std::vector<Index>& positions,
                        const scene::Image& truth, const FeatureNet<T>& net);
template <class T>
T perceptual_loss(const Matrix<T>& pred, const std::vector<Index>& positions, const scene::Image& truth,
                  const FeatureNet<T>& net);

LossBreakdown total_loss(double mse, double central, double perceptual, double lambda_central,
                         double lambda_perceptual);

/// (encoder rate, rest rate) at `iteration`.
std::pair<double, double> lr_at(int iteration, const TrainConfig& config);

template <class T>
struct AdamState {
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  std::int64_t step = 0;
};

template <class T>
class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit Adam(const ad::ParameterStore<T>& store);
  void step(ad::ParameterStore<T>& store, double lr_encoder, double lr_rest);
  AdamState<T>& state() { return state_; }
  const AdamState<T>& state() const { return state_; }

 private:
  AdamState<T> state_;
};

/// Loss terms of one training batch, bound to a tape.
struct LossGraph {
  ad::Var mse;
  ad::Var central;
  ad::Var perceptual;
  ad::Var total;  // mse + lambda_central * central + lambda_perceptual * perceptual
};

/// Renders `pixels` (row = y * w + x) of view `target` from `references`
/// and assembles the training loss.
template <class T>
LossGraph build_loss(ad::Tape<T>& tape, const render::CaesarModel<T>& model, const scene::SceneBundle& scene,
                     int target, const std::vector<render::ReferenceView>& references,
                     const std::vector<Index>& pixels, const geometry::Sampling& sampling, const FeatureNet<T>& net,
                     double lambda_central, double lambda_perceptual);

/// Scene plus the pixels each view may contribute to training.
struct TrainingScene {
  scene::SceneBundle bundle;
  std::vector<std::vector<Index>> train_pixels;  // per view
  std::vector<std::vector<Index>> heldout_pixels;
};

/// Splits every view's pixels into train/held-out sets with a seeded
/// shuffle; fraction 0 keeps everything for training.
TrainingScene make_training_scene(scene::SceneBundle bundle, double holdout_fraction, std::uint64_t seed);

template <class T>
class Trainer {
 public:
  Trainer(const render::ModelConfig& model, const TrainConfig& config, std::vector<TrainingScene> scenes);

  LossBreakdown train_step();
  int iteration() const { return iteration_; }
  void set_iteration(int it) { iteration_ = it; }

  render::CaesarModel<T>& model() { return model_; }
  const render::CaesarModel<T>& model() const { return model_; }
  const TrainConfig& config() const { return config_; }
  const std::vector<TrainingScene>& scenes() const { return scenes_; }
  Adam<T>& optimizer() { return adam_; }
  const Adam<T>& optimizer() const { return adam_; }
  std::mt19937_64& rng() { return rng_; }
  const std::mt19937_64& rng() const { return rng_; }

 private:
  render::CaesarModel<T> model_;
  TrainConfig config_;
  std::vector<TrainingScene> scenes_;
  Adam<T> adam_;
  FeatureNet<T> feature_net_;
  std::mt19937_64 rng_;
  int iteration_ = 0;
};

/// Reference views for `target` drawn from `scene` (nearest by pose).
std::vector<render::ReferenceView> choose_references(const scene::SceneBundle& scene, int target, int count,
                                                     bool include_target);

// ---------------------------------------------------------------------------
// Metrics

double psnr(const scene::Image& a, const scene::Image& b);
double ssim(const scene::Image& a, const scene::Image& b);

struct EvalResult {
  double psnr = 0;
  double ssim = 0;
  int images = 0;
};

/// Mean PSNR/SSIM of rendering `views_per_scene` target views of every
/// scene from its `n_refs` nearest other views.
template <class T>
EvalResult evaluate(const render::CaesarModel<T>& model, const std::vector<scene::SceneBundle>& scenes, int n_refs,
                    int views_per_scene, int batch_size);

/// PSNR over the held-out pixels of every view, rendered from the view's
/// nearest references (optionally including the view itself).
template <class T>
double heldout_psnr(const render::CaesarModel<T>& model, const TrainingScene& scene, int n_refs, int batch_size,
                    bool include_target);

}  // namespace caesar::train
