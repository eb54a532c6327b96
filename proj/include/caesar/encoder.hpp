#pragma once

// Shared convolutional encoder: per-view pixel feature grids and a global
// semantic vector (GAP over the bottleneck followed by a linear layer).

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "caesar/autodiff.hpp"
#include "caesar/scene.hpp"

namespace caesar::encoder {

struct EncoderConfig {
  int pixel_feature_dim = 64;  // L
  int semantic_dim = 96;       // C; must be divisible by 3 when calibrating
  int downsample_stages = 3;   // stride 2^stages
  int base_channels = 16;
  std::uint64_t seed = 0;

  void validate() const;
  int stride() const { return 1 << downsample_stages; }
  int bottleneck_channels() const { return base_channels << (downsample_stages - 1); }
};

/// Feature grid with one row per cell (row-major over the grid).
template <class T>
struct PixelFeatureMap {
  Matrix<T> grid;
  int grid_width = 0;
  int grid_height = 0;
  int stride = 1;
  int image_width = 0;
  int image_height = 0;

  Index dim() const { return grid.cols(); }
};

/// Four-tap bilinear stencil into a grid.
struct BilinearTaps {
  bool valid = false;
  std::array<Index, 4> index{};
  std::array<double, 4> weight{};
};

/// Taps at grid coordinates (u / stride, v / stride). The query is valid
/// when (u, v) lies inside the source image rectangle
/// [-0.5, image_w - 0.5] x [-0.5, image_h - 0.5]; grid coordinates are
/// clamped to the grid border.
BilinearTaps bilinear_taps(double u, double v, int grid_w, int grid_h, int stride, int image_w,
                           int image_h);

template <class T>
struct FeatureSample {
  RowVector<T> values;
  bool valid = false;
};

/// Bilinear feature lookup; zero vector and valid = false outside the image.
template <class T>
FeatureSample<T> sample_pixel_feature(const PixelFeatureMap<T>& fmap, double u, double v);

/// Channelwise mean over all rows (spatial positions).
template <class T>
RowVector<T> global_average_pool(const Matrix<T>& grid);

/// Image as an (h*w) x 3 matrix.
template <class T>
Matrix<T> image_matrix(const scene::Image& image);

/// Tape handles produced by Encoder::encode.
struct EncodedView {
  ad::Var pixel_features;  // (gh*gw) x L
  ad::Var semantic;        // 1 x C
  ad::Var bottleneck;      // (gh*gw) x bottleneck_channels
  int grid_width = 0;
  int grid_height = 0;
};

template <class T>
class Encoder {
 public:
  /// Registers parameters named "<prefix>.*" in the encoder group.
  Encoder(const EncoderConfig& config, ad::ParameterStore<T>& store, const std::string& prefix = "encoder");

  EncodedView encode(ad::Tape<T>& tape, const scene::Image& image) const;
  const EncoderConfig& config() const { return config_; }

 private:
  struct Block {
    ad::Parameter<T>* conv_weight;
    ad::Parameter<T>* conv_bias;
    ad::Parameter<T>* down_weight;
    ad::Parameter<T>* down_bias;
  };

  EncoderConfig config_;
  std::vector<Block> blocks_;
  ad::Parameter<T>* pixel_weight_;
  ad::Parameter<T>* pixel_bias_;
  ad::Parameter<T>* fc_weight_;
  ad::Parameter<T>* fc_bias_;
};

/// Inference helper: runs the encoder and returns plain values.
template <class T>
std::pair<PixelFeatureMap<T>, RowVector<T>> encode(const Encoder<T>& encoder, const scene::Image& image);

}  // namespace caesar::encoder
