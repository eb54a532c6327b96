#include "caesar/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace caesar::train {

void TrainConfig::validate() const {
  if (iterations < 0) throw ArgumentError("iterations must be >= 0");
  if (rays_per_iteration < 1) throw ArgumentError("rays_per_iteration must be >= 1");
  if (!(lr_encoder > 0) || !(lr_rest > 0)) throw ArgumentError("learning rates must be > 0");
  if (halve_every < 1) throw ArgumentError("halve_every must be >= 1");
  if (!(lambda_central >= 0) || !(lambda_perceptual >= 0)) throw ArgumentError("loss weights must be >= 0");
  if (min_refs < 1 || max_refs < min_refs) throw ArgumentError("reference range must satisfy 1 <= min <= max");
  if (!(holdout_fraction >= 0 && holdout_fraction < 1)) throw ArgumentError("holdout_fraction must be in [0, 1)");
}

template <class T>
T mse_loss(const Matrix<T>& pred, const Matrix<T>& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) throw ArgumentError("mse_loss: shape mismatch");
  if (pred.size() == 0) return T(0);
  return (pred - truth).squaredNorm() / T(pred.size());
}

// ---------------------------------------------------------------------------
// Perceptual loss

template <class T>
FeatureNet<T>::FeatureNet(std::uint64_t seed, std::vector<int> channels) {
  if (channels.empty()) throw ArgumentError("feature net needs at least one level");
  std::mt19937_64 rng(seed);
  int cin = 3;
  for (int c : channels) {
    if (c < 1) throw ArgumentError("feature net channels must be >= 1");
    weights_.push_back(ad::uniform_fan_in<T>(rng, 9 * cin, c, 9 * cin));
    biases_.push_back(ad::uniform_fan_in<T>(rng, 1, c, 9 * cin));
    cin = c;
  }
}

template <class T>
std::vector<ad::Var> FeatureNet<T>::features(ad::Tape<T>& tape, ad::Var image, Index h, Index w) const {
  std::vector<ad::Var> out;
  ad::Var x = image;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    x = ad::gelu(tape, ad::conv3x3(tape, x, h, w, tape.constant(weights_[l]), tape.constant(biases_[l]), 2));
    h = ad::conv_out_size(h, 2);
    w = ad::conv_out_size(w, 2);
    out.push_back(x);
  }
  return out;
}

template <class T>
ad::Var perceptual_loss(ad::Tape<T>& tape, ad::Var pred, const std::vector<Index>& positions,
                        const scene::Image& truth, const FeatureNet<T>& net) {
  const Index pixels = static_cast<Index>(truth.pixel_count());
  for (Index p : positions)
    if (p < 0 || p >= pixels) throw ArgumentError("perceptual_loss: position " + std::to_string(p) + " out of bounds");
  if (static_cast<Index>(positions.size()) != tape.rows(pred) || tape.cols(pred) != 3)
    throw ArgumentError("perceptual_loss: one rgb row per position required");
  if (positions.empty()) return tape.constant(Matrix<T>::Zero(1, 1));
  const Matrix<T> base = encoder::image_matrix<T>(truth);
  const ad::Var inpainted = ad::scatter_rows(tape, base, pred, positions);
  ad::Tape<T> side(false);
  const auto target = net.features(side, side.constant(base), truth.height, truth.width);
  const auto ours = net.features(tape, inpainted, truth.height, truth.width);
  ad::Var total;
  for (std::size_t l = 0; l < ours.size(); ++l) {
    const ad::Var term = ad::mse(tape, ours[l], tape.constant(side.value(target[l])));
    total = total.valid() ? ad::add(tape, total, term) : term;
  }
  return total;
}

template <class T>
T perceptual_loss(const Matrix<T>& pred, const std::vector<Index>& positions, const scene::Image& truth,
                  const FeatureNet<T>& net) {
  ad::Tape<T> tape(false);
  const ad::Var p = tape.constant(pred.size() == 0 ? Matrix<T>(0, 3) : pred);
  return tape.value(perceptual_loss(tape, p, positions, truth, net))(0, 0);
}

LossBreakdown total_loss(double mse, double central, double perceptual, double lambda_central,
                         double lambda_perceptual) {
  LossBreakdown b;
  b.mse = mse;
  b.central = central;
  b.perceptual = perceptual;
  b.lambda_central = lambda_central;
  b.lambda_perceptual = lambda_perceptual;
  b.total = mse + lambda_central * central + lambda_perceptual * perceptual;
  return b;
}

std::pair<double, double> lr_at(int iteration, const TrainConfig& config) {
  if (iteration < 0) throw ArgumentError("lr_at: iteration must be >= 0");
  const double f = std::ldexp(1.0, -(iteration / config.halve_every));
  return {config.lr_encoder * f, config.lr_rest * f};
}

// ---------------------------------------------------------------------------
// Adam

template <class T>
Adam<T>::Adam(const ad::ParameterStore<T>& store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    state_.m.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
    state_.v.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
  }
}

template <class T>
void Adam<T>::step(ad::ParameterStore<T>& store, double lr_encoder, double lr_rest) {
  if (store.size() != state_.m.size()) throw StateError("optimizer does not match the parameter store");
  ++state_.step;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(state_.step));
  const T b1 = T(kBeta1), b2 = T(kBeta2), eps = T(kEps);
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store[i];
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    m = b1 * m + (T(1) - b1) * p.grad;
    v = b2 * v + (T(1) - b2) * p.grad.cwiseAbs2();
    const T lr = T(p.group == ad::ParamGroup::encoder ? lr_encoder : lr_rest);
    const T s1 = T(1.0 / c1), s2 = T(1.0 / c2);
    p.value.array() -= lr * (m.array() * s1) / ((v.array() * s2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------
// Trainer

TrainingScene make_training_scene(scene::SceneBundle bundle, double holdout_fraction, std::uint64_t seed) {
  if (!(holdout_fraction >= 0 && holdout_fraction < 1)) throw ArgumentError("holdout_fraction must be in [0, 1)");
  bundle.validate();
  TrainingScene ts;
  std::mt19937_64 rng(seed);
  for (const auto& img : bundle.images) {
    std::vector<Index> all(img.pixel_count());
    std::iota(all.begin(), all.end(), Index{0});
    std::shuffle(all.begin(), all.end(), rng);
    const auto held = static_cast<std::size_t>(std::floor(holdout_fraction * static_cast<double>(all.size())));
    std::vector<Index> h(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(held));
    std::vector<Index> t(all.begin() + static_cast<std::ptrdiff_t>(held), all.end());
    std::sort(h.begin(), h.end());
    std::sort(t.begin(), t.end());
    ts.heldout_pixels.push_back(std::move(h));
    ts.train_pixels.push_back(std::move(t));
  }
  ts.bundle = std::move(bundle);
  return ts;
}

std::vector<render::ReferenceView> choose_references(const scene::SceneBundle& scene, int target, int count,
                                                     bool include_target) {
  if (target < 0 || target >= static_cast<int>(scene.cameras.size()))
    throw ArgumentError("target view index out of range");
  const auto idx = scene::select_reference_views(scene.cameras[static_cast<std::size_t>(target)], scene.cameras,
                                                 count, !include_target);
  std::vector<render::ReferenceView> refs;
  for (int i : idx) refs.push_back({&scene.images[static_cast<std::size_t>(i)], scene.cameras[static_cast<std::size_t>(i)]});
  return refs;
}

template <class T>
Trainer<T>::Trainer(const render::ModelConfig& model, const TrainConfig& config, std::vector<TrainingScene> scenes)
    : model_(model), config_(config), scenes_(std::move(scenes)), adam_(model_.parameters()), rng_(config.seed) {
  config_.validate();
  if (scenes_.empty()) throw ArgumentError("trainer needs at least one scene");
  for (const auto& s : scenes_) {
    const int views = static_cast<int>(s.bundle.images.size());
    const int available = config_.include_target ? views : views - 1;
    if (available < 1) throw ArgumentError("scene " + s.bundle.name + " has too few views for training");
  }
}

namespace {

std::string format_breakdown(int iteration, const LossBreakdown& b) {
  std::ostringstream os;
  os << "iteration " << iteration << ": mse=" << b.mse << " central=" << b.central << " perceptual=" << b.perceptual
     << " total=" << b.total;
  return os.str();
}

}  // namespace

template <class T>
LossGraph build_loss(ad::Tape<T>& tape, const render::CaesarModel<T>& model, const scene::SceneBundle& scene,
                     int target, const std::vector<render::ReferenceView>& references,
                     const std::vector<Index>& pixels, const geometry::Sampling& sampling, const FeatureNet<T>& net,
                     double lambda_central, double lambda_perceptual) {
  const auto& cam = scene.cameras.at(static_cast<std::size_t>(target));
  const auto& image = scene.images.at(static_cast<std::size_t>(target));
  std::vector<geometry::PixelCoord> coords;
  Matrix<T> truth(static_cast<Index>(pixels.size()), 3);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (pixels[i] < 0 || pixels[i] >= static_cast<Index>(image.pixel_count()))
      throw ArgumentError("build_loss: pixel index out of range");
    const int x = static_cast<int>(pixels[i] % cam.width), y = static_cast<int>(pixels[i] / cam.width);
    coords.push_back({static_cast<double>(x), static_cast<double>(y)});
    for (int c = 0; c < 3; ++c) truth(static_cast<Index>(i), c) = static_cast<T>(image.at(x, y, c));
  }
  const auto rays = geometry::generate_rays(cam, coords, scene.near, scene.far);
  const auto set = model.prepare(tape, cam, references);
  const auto out = model.render_rays(tape, set, rays, sampling);
  LossGraph g;
  g.mse = ad::mse(tape, out.rgb, tape.constant(std::move(truth)));
  g.central = set.semantics ? set.semantics->central : tape.constant(Matrix<T>::Zero(1, 1));
  g.perceptual = perceptual_loss(tape, out.rgb, pixels, image, net);
  g.total = ad::add(tape, ad::add(tape, g.mse, ad::scale(tape, g.central, T(lambda_central))),
                    ad::scale(tape, g.perceptual, T(lambda_perceptual)));
  return g;
}

template <class T>
LossBreakdown Trainer<T>::train_step() {
  const auto pick = [this](std::size_t n) { return static_cast<std::size_t>(rng_() % n); };
  const TrainingScene& ts = scenes_[pick(scenes_.size())];
  const auto& bundle = ts.bundle;
  const int views = static_cast<int>(bundle.images.size());
  const int target = static_cast<int>(pick(static_cast<std::size_t>(views)));
  const int available = config_.include_target ? views : views - 1;
  const int lo = std::min(config_.min_refs, available), hi = std::min(config_.max_refs, available);
  const int count = lo + static_cast<int>(pick(static_cast<std::size_t>(hi - lo + 1)));
  const auto refs = choose_references(bundle, target, count, config_.include_target);

  // Distinct pixels while the pool allows it, then with replacement.
  std::vector<Index> pool = ts.train_pixels[static_cast<std::size_t>(target)];
  if (pool.empty()) throw StateError("target view has no training pixels");
  std::vector<Index> pixels;
  const auto want = static_cast<std::size_t>(config_.rays_per_iteration);
  if (want <= pool.size()) {
    for (std::size_t i = 0; i < want; ++i) {
      std::swap(pool[i], pool[i + pick(pool.size() - i)]);
      pixels.push_back(pool[i]);
    }
  } else {
    for (std::size_t i = 0; i < want; ++i) pixels.push_back(pool[pick(pool.size())]);
  }

  ad::Tape<T> tape;
  const auto sampling = geometry::Sampling::stratified(rng_());
  const LossGraph g = build_loss(tape, model_, bundle, target, refs, pixels, sampling, feature_net_,
                                 config_.lambda_central, config_.lambda_perceptual);
  const ad::Var mse = g.mse, central = g.central, perceptual = g.perceptual, total = g.total;

  LossBreakdown b;
  b.mse = static_cast<double>(tape.value(mse)(0, 0));
  b.central = static_cast<double>(tape.value(central)(0, 0));
  b.perceptual = static_cast<double>(tape.value(perceptual)(0, 0));
  b.total = static_cast<double>(tape.value(total)(0, 0));
  b.lambda_central = config_.lambda_central;
  b.lambda_perceptual = config_.lambda_perceptual;
  if (!std::isfinite(b.total)) throw NumericError("non-finite loss at " + format_breakdown(iteration_, b));

  auto& store = model_.parameters();
  store.zero_grad();
  tape.backward(total);
  for (std::size_t i = 0; i < store.size(); ++i)
    if (!all_finite(store[i].grad))
      throw NumericError("non-finite gradient for " + store[i].name + " at " + format_breakdown(iteration_, b));
  const auto [lr_enc, lr_rest] = lr_at(iteration_, config_);
  adam_.step(store, lr_enc, lr_rest);
  ++iteration_;
  return b;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

void require_same_size(const scene::Image& a, const scene::Image& b, const char* what) {
  if (a.width != b.width || a.height != b.height || a.data.size() != b.data.size())
    throw ArgumentError(std::string(what) + ": image shapes differ");
  if (a.data.empty()) throw ArgumentError(std::string(what) + ": empty images");
}

}  // namespace

double psnr(const scene::Image& a, const scene::Image& b) {
  require_same_size(a, b, "psnr");
  double sum = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(a.data.size());
  if (mse < 1e-10) return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const scene::Image& first, const scene::Image& second) {
  require_same_size(first, second, "ssim");
  // Canonical argument order, so swapping inputs is exact.
  const bool swap = second.data < first.data;
  const scene::Image& a = swap ? second : first;
  const scene::Image& b = swap ? first : second;
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03, sigma = 1.5;
  // Windows shrink to the image for inputs smaller than 11 pixels.
  const int wx = std::min(11, a.width), wy = std::min(11, a.height);
  const auto kernel = [](int n) {
    std::vector<double> k(static_cast<std::size_t>(n));
    double s = 0;
    for (int i = 0; i < n; ++i) {
      const double x = i - (n - 1) / 2.0;
      k[static_cast<std::size_t>(i)] = std::exp(-x * x / (2 * sigma * sigma));
      s += k[static_cast<std::size_t>(i)];
    }
    for (auto& v : k) v /= s;
    return k;
  };
  const auto kx = kernel(wx), ky = kernel(wy);
  double total = 0;
  int count = 0;
  for (int c = 0; c < 3; ++c) {
    for (int y0 = 0; y0 + wy <= a.height; ++y0) {
      for (int x0 = 0; x0 + wx <= a.width; ++x0) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int j = 0; j < wy; ++j)
          for (int i = 0; i < wx; ++i) {
            const double w = ky[static_cast<std::size_t>(j)] * kx[static_cast<std::size_t>(i)];
            const double va = a.at(x0 + i, y0 + j, c), vb = b.at(x0 + i, y0 + j, c);
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * (va * vb);
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * (ma * mb) + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    }
  }
  return total / count;
}

template <class T>
EvalResult evaluate(const render::CaesarModel<T>& model, const std::vector<scene::SceneBundle>& scenes, int n_refs,
                       int views_per_scene, int batch_size) {
  if (views_per_scene < 1) throw ArgumentError("views_per_scene must be >= 1");
  EvalResult r;
  for (const auto& s : scenes) {
    const int views = static_cast<int>(s.images.size());
    const int count = std::min(views_per_scene, views);
    for (int i = 0; i < count; ++i) {
      const int target = i * views / count;
      const auto refs = choose_references(s, target, n_refs, false);
      const auto& cam = s.cameras[static_cast<std::size_t>(target)];
      const auto img = render::render_image(model, cam, refs, s.near, s.far, batch_size);
      r.psnr += psnr(img, s.images[static_cast<std::size_t>(target)]);
      r.ssim += ssim(img, s.images[static_cast<std::size_t>(target)]);
      ++r.images;
    }
  }
  if (r.images == 0) throw ArgumentError("evaluate: no scenes");
  r.psnr /= r.images;
  r.ssim /= r.images;
  return r;
}

template <class T>
double heldout_psnr(const render::CaesarModel<T>& model, const TrainingScene& scene, int n_refs, int batch_size,
                    bool include_target) {
  double sum = 0;
  std::size_t n = 0;
  const auto& b = scene.bundle;
  for (std::size_t v = 0; v < b.images.size(); ++v) {
    const auto& pixels = scene.heldout_pixels[v];
    if (pixels.empty()) continue;
    const int available = static_cast<int>(b.images.size()) - (include_target ? 0 : 1);
    const auto refs = choose_references(b, static_cast<int>(v), std::min(n_refs, available), include_target);
    const Matrix<T> rgb = render::render_pixels(model, b.cameras[v], refs, b.near, b.far, pixels, batch_size);
    for (std::size_t i = 0; i < pixels.size(); ++i)
      for (int c = 0; c < 3; ++c) {
        const double d = static_cast<double>(rgb(static_cast<Index>(i), c)) -
                         b.images[v].data[static_cast<std::size_t>(pixels[i] * 3 + c)];
        sum += d * d;
        ++n;
      }
  }
  if (n == 0) throw ArgumentError("heldout_psnr: scene has no held-out pixels");
  const double mse = sum / static_cast<double>(n);
  return mse < 1e-10 ? 99.0 : 10.0 * std::log10(1.0 / mse);
}

#define CAESAR_TRAIN_INSTANTIATE(T)                                                                           \
  template T mse_loss<T>(const Matrix<T>&, const Matrix<T>&);                                                 \
  template class FeatureNet<T>;                                                                               \
  template ad::Var perceptual_loss<T>(ad::Tape<T>&, ad::Var, const std::vector<Index>&, const scene::Image&,  \
                                      const FeatureNet<T>&);                                                  \
  template T perceptual_loss<T>(const Matrix<T>&, const std::vector<Index>&, const scene::Image&,             \
                                const FeatureNet<T>&);                                                        \
  template LossGraph build_loss<T>(ad::Tape<T>&, const render::CaesarModel<T>&, const scene::SceneBundle&, int, \
                                   const std::vector<render::ReferenceView>&, const std::vector<Index>&,       \
                                   const geometry::Sampling&, const FeatureNet<T>&, double, double);           \
  template class Adam<T>;                                                                                     \
  template class Trainer<T>;                                                                                  \
  template EvalResult evaluate<T>(const render::CaesarModel<T>&, const std::vector<scene::SceneBundle>&,   \
                                     int, int, int);                                                          \
  template double heldout_psnr<T>(const render::CaesarModel<T>&, const TrainingScene&, int, int, bool);

CAESAR_TRAIN_INSTANTIATE(float)
CAESAR_TRAIN_INSTANTIATE(double)

}  // namespace caesar::train
