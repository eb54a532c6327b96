#include "caesar/render.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace caesar::render {

void StackConfig::validate() const {
  if (stages < 1) throw ArgumentError("stages must be >= 1");
  if (heads < 1 || pixel_dim % heads != 0) throw ArgumentError("heads must divide pixel_dim");
  if (semantic_dim < 1) throw ArgumentError("semantic_dim must be >= 1");
  if (points_per_ray < 1) throw ArgumentError("points_per_ray must be >= 1");
  if (ff_width < 1) throw ArgumentError("ff_width must be >= 1");
  if (pos_freqs < 0) throw ArgumentError("pos_freqs must be >= 0");
}

void ModelConfig::finalize() {
  stack.pixel_dim = encoder.pixel_feature_dim;
  stack.semantic_dim = encoder.semantic_dim;
  validate();
}

void ModelConfig::validate() const {
  encoder.validate();
  stack.validate();
  if (stack.pixel_dim != encoder.pixel_feature_dim || stack.semantic_dim != encoder.semantic_dim)
    throw ConfigError("stack dimensions do not match the encoder");
  if (semantic.enabled) {
    if (semantic.calibrate && encoder.semantic_dim % 3 != 0)
      throw ArgumentError("semantic_dim " + std::to_string(encoder.semantic_dim) +
                          " must be divisible by 3 when calibration is enabled");
    if (semantic.refine && (semantic.heads < 1 || encoder.semantic_dim % semantic.heads != 0))
      throw ArgumentError("semantic heads must divide semantic_dim");
  }
}

// ---------------------------------------------------------------------------
// Building blocks

template <class T>
Linear<T> Linear<T>::make(ad::ParameterStore<T>& store, const std::string& name, int in, int out, bool with_bias,
                          std::mt19937_64& rng) {
  Linear l;
  l.weight = &store.add(name + ".weight", ad::ParamGroup::rest, ad::uniform_fan_in<T>(rng, in, out, in));
  if (with_bias) l.bias = &store.add(name + ".bias", ad::ParamGroup::rest, Matrix<T>::Zero(1, out));
  return l;
}

template <class T>
ad::Var Linear<T>::apply(ad::Tape<T>& tape, ad::Var x) const {
  return ad::linear(tape, x, tape.param(*weight), bias ? tape.param(*bias) : ad::Var{});
}

template <class T>
LayerNorm<T> LayerNorm<T>::make(ad::ParameterStore<T>& store, const std::string& name, int dim) {
  LayerNorm n;
  n.gain = &store.add(name + ".gain", ad::ParamGroup::rest, Matrix<T>::Ones(1, dim));
  n.bias = &store.add(name + ".bias", ad::ParamGroup::rest, Matrix<T>::Zero(1, dim));
  return n;
}

template <class T>
ad::Var LayerNorm<T>::apply(ad::Tape<T>& tape, ad::Var x) const {
  return ad::layer_norm(tape, x, tape.param(*gain), tape.param(*bias));
}

template <class T>
FeedForward<T> FeedForward<T>::make(ad::ParameterStore<T>& store, const std::string& name, int dim, int width,
                                    std::mt19937_64& rng) {
  FeedForward f;
  f.norm = LayerNorm<T>::make(store, name + ".norm", dim);
  f.in = Linear<T>::make(store, name + ".in", dim, width, true, rng);
  f.out = Linear<T>::make(store, name + ".out", width, dim, true, rng);
  return f;
}

template <class T>
ad::Var FeedForward<T>::apply(ad::Tape<T>& tape, ad::Var h) const {
  return ad::add(tape, h, out.apply(tape, ad::gelu(tape, in.apply(tape, norm.apply(tape, h)))));
}

// ---------------------------------------------------------------------------
// View transformer

template <class T>
TokenProjection<T> TokenProjection<T>::make(ad::ParameterStore<T>& store, const std::string& name,
                                            const StackConfig& config, std::mt19937_64& rng) {
  const int l = config.pixel_dim;
  TokenProjection p;
  p.feature = Linear<T>::make(store, name + ".feature", l, l, false, rng);
  p.geometry = Linear<T>::make(store, name + ".geometry", kViewFeatureDim, l, false, rng);
  p.point = Linear<T>::make(store, name + ".point", 2 * encoding_dim(config.pos_freqs), l, true, rng);
  return p;
}

template <class T>
ad::Var TokenProjection<T>::apply(ad::Tape<T>& tape, const ViewInputs<T>& in) const {
  const Index p = tape.rows(in.point_encoding);
  const Index rows = p * in.views;
  if (in.taps.rows() != rows || tape.rows(in.geometry) != rows)
    throw ArgumentError("view tokens: expected points x views rows");
  std::vector<Index> spread(static_cast<std::size_t>(rows));
  for (Index i = 0; i < rows; ++i) spread[static_cast<std::size_t>(i)] = i / in.views;
  const ad::Var f = ad::sparse_combine(tape, feature.apply(tape, in.grid), in.taps);
  const ad::Var g = geometry.apply(tape, in.geometry);
  const ad::Var pt = ad::gather_rows(tape, point.apply(tape, in.point_encoding), std::move(spread));
  return ad::add(tape, ad::add(tape, f, g), pt);
}

template <class T>
ViewTransformer<T>::ViewTransformer(const StackConfig& config, ad::ParameterStore<T>& store,
                                    const std::string& prefix, std::mt19937_64& rng)
    : config_(config) {
  const int l = config_.pixel_dim;
  key_ = TokenProjection<T>::make(store, prefix + ".key", config_, rng);
  value_ = TokenProjection<T>::make(store, prefix + ".value", config_, rng);
  query_norm_ = LayerNorm<T>::make(store, prefix + ".query_norm", l);
  q_ = Linear<T>::make(store, prefix + ".query", l, l, true, rng);
  // No output bias: a point without any valid view fuses to exactly zero.
  o_ = Linear<T>::make(store, prefix + ".out", l, l, false, rng);
  ff_ = FeedForward<T>::make(store, prefix + ".ff", l, config_.ff_width, rng);
}

template <class T>
ad::Var ViewTransformer<T>::values(ad::Tape<T>& tape, const ViewInputs<T>& in) const {
  return value_.apply(tape, in);
}

template <class T>
ad::Var ViewTransformer<T>::view_transform(ad::Tape<T>& tape, const ViewInputs<T>& in, ad::Var current) const {
  if (tape.rows(current) * in.views != tape.rows(in.geometry))
    throw ArgumentError("view transform: one current token per point required");
  if (!in.mask.empty() && static_cast<Index>(in.mask.size()) != tape.rows(in.geometry))
    throw ArgumentError("view transform: mask size mismatch");
  const ad::Var q = q_.apply(tape, query_norm_.apply(tape, current));
  const ad::Var k = key_.apply(tape, in);
  const ad::Var v = value_.apply(tape, in);
  return o_.apply(tape, ad::block_attention(tape, q, k, v, config_.heads, 1, in.views, in.mask));
}

template <class T>
ad::Var ViewTransformer<T>::apply(ad::Tape<T>& tape, ad::Var current, const ViewInputs<T>& in) const {
  const ad::Var h = ad::add(tape, current, view_transform(tape, in, current));
  return ff_.apply(tape, h);
}

// ---------------------------------------------------------------------------
// Semantic augmentation

template <class T>
SemanticAugment<T>::SemanticAugment(const StackConfig& config, ad::ParameterStore<T>& store,
                                    const std::string& prefix, std::mt19937_64& rng)
    : config_(config) {
  const int w = config_.pixel_dim + config_.semantic_dim;
  hidden_ = Linear<T>::make(store, prefix + ".hidden", w, w, true, rng);
  out_ = Linear<T>::make(store, prefix + ".out", w, config_.pixel_dim, true, rng);
}

template <class T>
ad::Var SemanticAugment<T>::apply(ad::Tape<T>& tape, ad::Var tokens, ad::Var semantic) const {
  const Index l = config_.pixel_dim, c = config_.semantic_dim;
  if (tape.cols(tokens) != l) throw ArgumentError("augment: tokens must have L columns");
  if (tape.rows(semantic) != 1 || tape.cols(semantic) != c) throw ArgumentError("augment: semantic must be 1 x C");
  // [h, s] W1 = h W1[:L] + s W1[L:], so the semantic half is computed once
  // and broadcast to every point.
  const ad::Var w1 = tape.param(*hidden_.weight);
  const ad::Var top = ad::slice_rows(tape, w1, 0, l);
  const ad::Var bottom = ad::slice_rows(tape, w1, l, c);
  const ad::Var sem = ad::linear(tape, semantic, bottom, tape.param(*hidden_.bias));
  const ad::Var hidden = ad::add_row(tape, ad::matmul(tape, tokens, top), sem);
  return out_.apply(tape, ad::gelu(tape, hidden));
}

// ---------------------------------------------------------------------------
// Ray transformer

template <class T>
RayTransformer<T>::RayTransformer(const StackConfig& config, ad::ParameterStore<T>& store,
                                  const std::string& prefix, std::mt19937_64& rng)
    : config_(config) {
  const int l = config_.pixel_dim;
  norm_ = LayerNorm<T>::make(store, prefix + ".norm", l);
  q_ = Linear<T>::make(store, prefix + ".query", l, l, true, rng);
  k_ = Linear<T>::make(store, prefix + ".key", l, l, true, rng);
  v_ = Linear<T>::make(store, prefix + ".value", l, l, true, rng);
  o_ = Linear<T>::make(store, prefix + ".out", l, l, true, rng);
  ff_ = FeedForward<T>::make(store, prefix + ".ff", l, config_.ff_width, rng);
}

template <class T>
ad::Var RayTransformer<T>::apply(ad::Tape<T>& tape, ad::Var tokens, Index points_per_ray) const {
  const Index rows = tape.rows(tokens);
  if (points_per_ray < 1 || rows % points_per_ray != 0)
    throw ArgumentError("ray transformer: token rows must be a multiple of points_per_ray");
  const Index rays = rows / points_per_ray;
  const Matrix<T> pe = depth_encoding<T>(points_per_ray, config_.pixel_dim);
  Matrix<T> tiled(rows, config_.pixel_dim);
  for (Index r = 0; r < rays; ++r) tiled.middleRows(r * points_per_ray, points_per_ray) = pe;
  const ad::Var x = norm_.apply(tape, tokens);
  const ad::Var xp = ad::add(tape, x, tape.constant(std::move(tiled)));
  const ad::Var q = q_.apply(tape, xp);
  const ad::Var k = k_.apply(tape, xp);
  const ad::Var v = v_.apply(tape, x);
  const ad::Var att = ad::block_attention(tape, q, k, v, config_.heads, points_per_ray, points_per_ray);
  return ff_.apply(tape, ad::add(tape, tokens, o_.apply(tape, att)));
}

template <class T>
void encode_vector(const geometry::Vec3& x, int freqs, T* out) {
  for (int c = 0; c < 3; ++c) *out++ = static_cast<T>(x[c]);
  for (int i = 0; i < freqs; ++i) {
    const double f = std::ldexp(1.0, i);
    for (int c = 0; c < 3; ++c) {
      *out++ = static_cast<T>(std::sin(f * x[c]));
      *out++ = static_cast<T>(std::cos(f * x[c]));
    }
  }
}

template <class T>
Matrix<T> depth_encoding(Index points, Index dim) {
  Matrix<T> pe(points, dim);
  for (Index m = 0; m < points; ++m)
    for (Index j = 0; j < dim; ++j) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(dim));
      const double a = static_cast<double>(m) * rate;
      pe(m, j) = static_cast<T>(j % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  return pe;
}

// ---------------------------------------------------------------------------
// Model

template <class T>
CaesarModel<T>::CaesarModel(ModelConfig config) : config_(std::move(config)) {
  config_.finalize();
  const StackConfig& s = config_.stack;
  encoder_ = std::make_unique<encoder::Encoder<T>>(config_.encoder, store_, "encoder");
  std::mt19937_64 rng(s.seed);
  if (config_.semantic.enabled && config_.semantic.refine) {
    core::RefinementConfig rc;
    rc.semantic_dim = s.semantic_dim;
    rc.heads = config_.semantic.heads;
    rc.mode = config_.semantic.mode;
    refiner_ = std::make_unique<core::SemanticRefiner<T>>(rc, s.stages, store_, "refine", rng);
  }
  initial_ = Linear<T>::make(store_, "initial", 2 * encoding_dim(s.pos_freqs), s.pixel_dim, true, rng);
  for (int k = 0; k < s.stages; ++k) {
    const std::string name = "stage" + std::to_string(k);
    view_.emplace_back(s, store_, name + ".view", rng);
    if (config_.semantic.enabled) augment_.emplace_back(s, store_, name + ".augment", rng);
    ray_.emplace_back(s, store_, name + ".ray", rng);
  }
  pool_norm_ = LayerNorm<T>::make(store_, "pool.norm", s.pixel_dim);
  pool_query_ = &store_.add("pool.query", ad::ParamGroup::rest,
                            ad::uniform_fan_in<T>(rng, 1, s.pixel_dim, s.pixel_dim));
  rgb_head_ = Linear<T>::make(store_, "rgb", s.pixel_dim, 3, true, rng);
}

namespace {

std::vector<double> sort_key(const ReferenceView& v) {
  const auto& c = v.camera;
  const geometry::Vec3 center = c.pose.center();
  std::vector<double> key{center.x(), center.y(), center.z()};
  for (int i = 0; i < 9; ++i) key.push_back(c.pose.rotation.matrix()(i / 3, i % 3));
  key.insert(key.end(), {c.intrinsics.fx, c.intrinsics.fy, c.intrinsics.cx, c.intrinsics.cy,
                         static_cast<double>(c.width), static_cast<double>(c.height)});
  key.insert(key.end(), v.image->data.begin(), v.image->data.end());
  return key;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

template <class T>
ReferenceSet<T> CaesarModel<T>::prepare(ad::Tape<T>& tape, const geometry::Camera& target,
                                        std::vector<ReferenceView> references) const {
  if (references.empty()) throw ArgumentError("at least one reference view is required");
  target.validate();
  for (const auto& r : references) {
    if (r.image == nullptr) throw ArgumentError("reference view without an image");
    r.camera.validate();
    if (r.image->width != r.camera.width || r.image->height != r.camera.height)
      throw ArgumentError("reference image size does not match its camera");
  }
  std::vector<std::vector<double>> keys;
  for (const auto& r : references) keys.push_back(sort_key(r));
  std::vector<std::size_t> order(references.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });

  ReferenceSet<T> set;
  set.target = target;
  set.stride = config_.encoder.stride();
  std::vector<ad::Var> grids, semantics;
  Index offset = 0;
  for (std::size_t i : order) {
    set.views.push_back(references[i]);
    const encoder::EncodedView ev = encoder_->encode(tape, *references[i].image);
    grids.push_back(ev.pixel_features);
    semantics.push_back(ev.semantic);
    set.layout.push_back({offset, ev.grid_width, ev.grid_height});
    offset += static_cast<Index>(ev.grid_width) * ev.grid_height;
  }
  set.features = ad::concat_rows<T>(tape, grids);
  if (config_.semantic.enabled) {
    set.originals = ad::concat_rows<T>(tape, semantics);
    std::vector<geometry::Pose> poses;
    for (const auto& v : set.views) poses.push_back(v.camera.pose);
    core::SemanticOptions opts{config_.semantic.calibrate, config_.semantic.refine};
    std::vector<Eigen::Matrix<T, 3, 3>> rotations;
    if (opts.calibrate) rotations = core::relative_rotations<T>(target.pose, poses);
    set.semantics = core::build_semantic_stages<T>(tape, set.originals, std::move(rotations), opts, refiner_.get(),
                                                   config_.stack.stages);
  }
  return set;
}

template <class T>
ReferenceSet<T> CaesarModel<T>::rebind(ad::Tape<T>& to, const ad::Tape<T>& from, const ReferenceSet<T>& set) const {
  ReferenceSet<T> out = set;
  out.features = to.constant(from.value(set.features));
  if (set.originals.valid()) out.originals = to.constant(from.value(set.originals));
  if (set.semantics) {
    auto& s = *out.semantics;
    for (auto& v : s.per_stage) v = to.constant(from.value(v));
    s.per_view = to.constant(from.value(set.semantics->per_view));
    s.aggregate = to.constant(from.value(set.semantics->aggregate));
    s.central = to.constant(from.value(set.semantics->central));
  }
  return out;
}

template <class T>
RenderOutput<T> CaesarModel<T>::render_rays(ad::Tape<T>& tape, const ReferenceSet<T>& refs,
                                            const std::vector<geometry::Ray>& rays,
                                            const geometry::Sampling& sampling,
                                            const RenderHooks<T>* hooks) const {
  const StackConfig& s = config_.stack;
  if (rays.empty()) throw ArgumentError("render_rays: no rays");
  const Index r_count = static_cast<Index>(rays.size());
  const Index m = s.points_per_ray;
  const Index n = static_cast<Index>(refs.views.size());
  const Index p_count = r_count * m;
  const int enc = encoding_dim(s.pos_freqs);

  Matrix<T> point_enc(p_count, 2 * enc);
  Matrix<T> view_geom = Matrix<T>::Zero(p_count * n, kViewFeatureDim);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(p_count * n), 0);
  ad::SparseRows<T> taps;
  RenderOutput<T> out;
  out.fallback.assign(static_cast<std::size_t>(p_count), 0);

  std::vector<geometry::Vec3> centers;
  for (const auto& v : refs.views) centers.push_back(v.camera.pose.center());

  for (Index r = 0; r < r_count; ++r) {
    const auto& ray = rays[static_cast<std::size_t>(r)];
    if (!ray.origin.allFinite() || !ray.direction.allFinite() || !(ray.far > ray.near))
      throw ArgumentError("render_rays: invalid ray");
    const geometry::Vec3 dir = ray.direction.normalized();
    geometry::Sampling ray_sampling = sampling;
    ray_sampling.seed = mix_seed(sampling.seed, static_cast<std::uint64_t>(r));
    const auto depths = geometry::sample_depths(ray.near, ray.far, static_cast<int>(m), ray_sampling);
    for (Index j = 0; j < m; ++j) {
      const Index p = r * m + j;
      const geometry::Vec3 pos = ray.at(depths[static_cast<std::size_t>(j)]);
      encode_vector<T>(pos, s.pos_freqs, point_enc.row(p).data());
      encode_vector<T>(dir, s.pos_freqs, point_enc.row(p).data() + enc);
      bool any = false;
      for (Index v = 0; v < n; ++v) {
        const Index row = p * n + v;
        const auto& ref = refs.views[static_cast<std::size_t>(v)];
        const auto& lay = refs.layout[static_cast<std::size_t>(v)];
        const auto proj = geometry::project(pos, ref.camera);
        encoder::BilinearTaps ft;
        if (proj.valid)
          ft = encoder::bilinear_taps(proj.u, proj.v, lay.grid_width, lay.grid_height, refs.stride, ref.camera.width,
                                      ref.camera.height);
        if (ft.valid) {
          for (int t = 0; t < 4; ++t) taps.add(lay.row_offset + ft.index[t], static_cast<T>(ft.weight[t]));
          const auto it = encoder::bilinear_taps(proj.u, proj.v, ref.camera.width, ref.camera.height, 1,
                                                 ref.camera.width, ref.camera.height);
          const auto& img = ref.image->data;
          for (int t = 0; t < 4; ++t)
            for (int c = 0; c < 3; ++c)
              view_geom(row, c) += static_cast<T>(it.weight[t] * img[static_cast<std::size_t>(it.index[t] * 3 + c)]);
          const geometry::Vec3 ref_dir = (pos - centers[static_cast<std::size_t>(v)]).normalized();
          const geometry::Vec3 delta = ref_dir - dir;
          for (int c = 0; c < 3; ++c) view_geom(row, 3 + c) = static_cast<T>(delta[c]);
          view_geom(row, 6) = static_cast<T>(ref_dir.dot(dir));
          mask[static_cast<std::size_t>(row)] = 1;
          any = true;
        }
        taps.finish_row();
      }
      out.fallback[static_cast<std::size_t>(p)] = any ? 0 : 1;
    }
  }

  ViewInputs<T> in;
  in.grid = refs.features;
  in.taps = std::move(taps);
  in.geometry = tape.constant(std::move(view_geom));
  in.point_encoding = tape.constant(std::move(point_enc));
  in.mask = std::move(mask);
  in.views = n;
  ad::Var h = initial_.apply(tape, in.point_encoding);
  for (int k = 0; k < s.stages; ++k) {
    h = view_[static_cast<std::size_t>(k)].apply(tape, h, in);
    if (config_.semantic.enabled) {
      if (!refs.semantics) throw StateError("render_rays: reference set was prepared without semantics");
      const ad::Var sem = refs.semantics->per_stage[static_cast<std::size_t>(k)];
      if (!all_finite(tape.value(sem)))
        throw NumericError("non-finite semantic vector at stage " + std::to_string(k));
      if (hooks && hooks->on_stage_semantic) hooks->on_stage_semantic(k, tape.value(sem));
      h = augment_[static_cast<std::size_t>(k)].apply(tape, h, sem);
    }
    h = ray_[static_cast<std::size_t>(k)].apply(tape, h, m);
    if (!all_finite(tape.value(h))) throw NumericError("non-finite point tokens at stage " + std::to_string(k));
    if (hooks && hooks->on_stage_tokens) hooks->on_stage_tokens(k, tape.value(h));
  }
  const ad::Var q = ad::repeat_row(tape, tape.param(*pool_query_), r_count);
  const ad::Var pooled = ad::block_attention(tape, q, pool_norm_.apply(tape, h), h, 1, 1, m);
  out.rgb = ad::sigmoid(tape, rgb_head_.apply(tape, pooled));
  if (!all_finite(tape.value(out.rgb))) throw NumericError("non-finite rgb output");
  return out;
}

// ---------------------------------------------------------------------------
// Inference helpers

template <class T>
RayPrediction render_ray(const CaesarModel<T>& model, const geometry::Ray& ray,
                         const std::vector<ReferenceView>& references, const geometry::Camera& target) {
  ad::Tape<T> tape(false);
  const auto set = model.prepare(tape, target, references);
  const auto out = model.render_rays(tape, set, {ray}, geometry::Sampling::midpoint());
  const auto& rgb = tape.value(out.rgb);
  return {geometry::Vec3(rgb(0, 0), rgb(0, 1), rgb(0, 2))};
}

template <class T>
Matrix<T> render_pixels(const CaesarModel<T>& model, const geometry::Camera& target,
                        const std::vector<ReferenceView>& references, double near, double far,
                        const std::vector<Index>& pixels, int batch_size) {
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  ad::Tape<T> base(false);
  const auto set = model.prepare(base, target, references);
  Matrix<T> out(static_cast<Index>(pixels.size()), 3);
  for (std::size_t start = 0; start < pixels.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(pixels.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<geometry::PixelCoord> coords;
    for (std::size_t i = start; i < end; ++i) {
      const Index idx = pixels[i];
      if (idx < 0 || idx >= static_cast<Index>(target.width) * target.height)
        throw ArgumentError("render_pixels: pixel index out of range");
      coords.push_back({static_cast<double>(idx % target.width), static_cast<double>(idx / target.width)});
    }
    const auto rays = geometry::generate_rays(target, coords, near, far);
    ad::Tape<T> tape(false);
    const auto bound = model.rebind(tape, base, set);
    const auto res = model.render_rays(tape, bound, rays, geometry::Sampling::midpoint());
    out.middleRows(static_cast<Index>(start), static_cast<Index>(end - start)) = tape.value(res.rgb);
  }
  return out;
}

template <class T>
scene::Image render_image(const CaesarModel<T>& model, const geometry::Camera& target,
                          const std::vector<ReferenceView>& references, double near, double far,
                          int batch_size) {
  std::vector<Index> pixels(static_cast<std::size_t>(target.width) * target.height);
  std::iota(pixels.begin(), pixels.end(), Index{0});
  const Matrix<T> rgb = render_pixels(model, target, references, near, far, pixels, batch_size);
  scene::Image img(target.width, target.height);
  for (Index i = 0; i < rgb.rows(); ++i)
    for (int c = 0; c < 3; ++c) img.data[static_cast<std::size_t>(i * 3 + c)] = static_cast<double>(rgb(i, c));
  return img;
}

#define CAESAR_RENDER_INSTANTIATE(T)                                                                          \
  template struct Linear<T>;                                                                                  \
  template struct LayerNorm<T>;                                                                               \
  template struct FeedForward<T>;                                                                             \
  template struct TokenProjection<T>;                                                                         \
  template class ViewTransformer<T>;                                                                          \
  template class SemanticAugment<T>;                                                                          \
  template class RayTransformer<T>;                                                                           \
  template void encode_vector<T>(const geometry::Vec3&, int, T*);                                             \
  template Matrix<T> depth_encoding<T>(Index, Index);                                                         \
  template class CaesarModel<T>;                                                                              \
  template RayPrediction render_ray<T>(const CaesarModel<T>&, const geometry::Ray&,                           \
                                       const std::vector<ReferenceView>&, const geometry::Camera&);           \
  template scene::Image render_image<T>(const CaesarModel<T>&, const geometry::Camera&,                       \
                                        const std::vector<ReferenceView>&, double, double, int);              \
  template Matrix<T> render_pixels<T>(const CaesarModel<T>&, const geometry::Camera&,                         \
                                      const std::vector<ReferenceView>&, double, double,                      \
                                      const std::vector<Index>&, int);

CAESAR_RENDER_INSTANTIATE(float)
CAESAR_RENDER_INSTANTIATE(double)

}  // namespace caesar::render
