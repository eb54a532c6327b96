#include "caesar/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace caesar::encoder {

void EncoderConfig::validate() const {
  if (pixel_feature_dim < 1) throw ArgumentError("pixel_feature_dim must be >= 1");
  // Divisibility by 3 is a calibration requirement, checked by ModelConfig.
  if (semantic_dim < 1) throw ArgumentError("semantic_dim must be >= 1");
  if (downsample_stages < 1) throw ArgumentError("downsample_stages must be >= 1");
  if (base_channels < 1) throw ArgumentError("base_channels must be >= 1");
}

BilinearTaps bilinear_taps(double u, double v, int grid_w, int grid_h, int stride, int image_w,
                           int image_h) {
  BilinearTaps taps;
  if (!(u >= -0.5 && u <= image_w - 0.5 && v >= -0.5 && v <= image_h - 0.5)) return taps;
  const double x = std::clamp(u / stride, 0.0, static_cast<double>(grid_w - 1));
  const double y = std::clamp(v / stride, 0.0, static_cast<double>(grid_h - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, grid_w - 1);
  const int y1 = std::min(y0 + 1, grid_h - 1);
  const double fx = x - x0, fy = y - y0;
  taps.valid = true;
  taps.index = {static_cast<Index>(y0) * grid_w + x0, static_cast<Index>(y0) * grid_w + x1,
                static_cast<Index>(y1) * grid_w + x0, static_cast<Index>(y1) * grid_w + x1};
  taps.weight = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  return taps;
}

template <class T>
FeatureSample<T> sample_pixel_feature(const PixelFeatureMap<T>& fmap, double u, double v) {
  FeatureSample<T> s;
  s.values = RowVector<T>::Zero(fmap.dim());
  const auto taps = bilinear_taps(u, v, fmap.grid_width, fmap.grid_height, fmap.stride,
                                  fmap.image_width, fmap.image_height);
  if (!taps.valid) return s;
  s.valid = true;
  for (int k = 0; k < 4; ++k) s.values += static_cast<T>(taps.weight[k]) * fmap.grid.row(taps.index[k]);
  return s;
}

template <class T>
RowVector<T> global_average_pool(const Matrix<T>& grid) {
  if (grid.rows() < 1 || grid.cols() < 1) throw ArgumentError("global_average_pool: empty grid");
  return grid.colwise().mean();
}

template <class T>
Matrix<T> image_matrix(const scene::Image& image) {
  Matrix<T> m(static_cast<Index>(image.pixel_count()), 3);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(image.data[static_cast<std::size_t>(i)]);
  return m;
}

template <class T>
Encoder<T>::Encoder(const EncoderConfig& config, ad::ParameterStore<T>& store, const std::string& prefix)
    : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const auto group = ad::ParamGroup::encoder;
  int cin = 3;
  for (int b = 0; b < config_.downsample_stages; ++b) {
    const int c = config_.base_channels << b;
    const std::string name = prefix + ".block" + std::to_string(b);
    Block blk{};
    blk.conv_weight = &store.add(name + ".conv.weight", group, ad::uniform_fan_in<T>(rng, 9 * cin, c, 9 * cin));
    blk.conv_bias = &store.add(name + ".conv.bias", group, Matrix<T>::Zero(1, c));
    blk.down_weight = &store.add(name + ".down.weight", group, ad::uniform_fan_in<T>(rng, 9 * c, c, 9 * c));
    blk.down_bias = &store.add(name + ".down.bias", group, Matrix<T>::Zero(1, c));
    blocks_.push_back(blk);
    cin = c;
  }
  const int cb = config_.bottleneck_channels();
  pixel_weight_ = &store.add(prefix + ".pixel.weight", group,
                             ad::uniform_fan_in<T>(rng, cb, config_.pixel_feature_dim, cb));
  pixel_bias_ = &store.add(prefix + ".pixel.bias", group, Matrix<T>::Zero(1, config_.pixel_feature_dim));
  fc_weight_ = &store.add(prefix + ".fc.weight", group, ad::uniform_fan_in<T>(rng, cb, config_.semantic_dim, cb));
  fc_bias_ = &store.add(prefix + ".fc.bias", group, Matrix<T>::Zero(1, config_.semantic_dim));
}

template <class T>
EncodedView Encoder<T>::encode(ad::Tape<T>& tape, const scene::Image& image) const {
  if (!image.all_finite()) throw ArgumentError("encode: image contains non-finite values");
  Index h = image.height, w = image.width;
  ad::Var x = tape.constant(image_matrix<T>(image));
  for (const auto& blk : blocks_) {
    x = ad::gelu(tape, ad::conv3x3(tape, x, h, w, tape.param(*blk.conv_weight), tape.param(*blk.conv_bias), 1));
    x = ad::gelu(tape, ad::conv3x3(tape, x, h, w, tape.param(*blk.down_weight), tape.param(*blk.down_bias), 2));
    h = ad::conv_out_size(h, 2);
    w = ad::conv_out_size(w, 2);
  }
  EncodedView out;
  out.bottleneck = x;
  out.grid_height = static_cast<int>(h);
  out.grid_width = static_cast<int>(w);
  out.pixel_features = ad::linear(tape, x, tape.param(*pixel_weight_), tape.param(*pixel_bias_));
  out.semantic = ad::linear(tape, ad::mean_rows(tape, x), tape.param(*fc_weight_), tape.param(*fc_bias_));
  return out;
}

template <class T>
std::pair<PixelFeatureMap<T>, RowVector<T>> encode(const Encoder<T>& encoder, const scene::Image& image) {
  ad::Tape<T> tape;
  const EncodedView v = encoder.encode(tape, image);
  PixelFeatureMap<T> fmap;
  fmap.grid = tape.value(v.pixel_features);
  fmap.grid_width = v.grid_width;
  fmap.grid_height = v.grid_height;
  fmap.stride = encoder.config().stride();
  fmap.image_width = image.width;
  fmap.image_height = image.height;
  RowVector<T> semantic = tape.value(v.semantic).row(0);
  return {std::move(fmap), std::move(semantic)};
}

#define CAESAR_ENCODER_INSTANTIATE(T)                                                        \
  template FeatureSample<T> sample_pixel_feature<T>(const PixelFeatureMap<T>&, double, double); \
  template RowVector<T> global_average_pool<T>(const Matrix<T>&);                            \
  template Matrix<T> image_matrix<T>(const scene::Image&);                                   \
  template class Encoder<T>;                                                                 \
  template std::pair<PixelFeatureMap<T>, RowVector<T>> encode<T>(const Encoder<T>&, const scene::Image&);

CAESAR_ENCODER_INSTANTIATE(float)
CAESAR_ENCODER_INSTANTIATE(double)

}  // namespace caesar::encoder
