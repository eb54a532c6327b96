#include "caesar/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "caesar/caesar_core.hpp"
#include "caesar/render.hpp"
#include "caesar/training.hpp"

namespace caesar::gradcheck {

double Report::max_error() const {
  double m = 0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_error);
  return m;
}

bool Report::passed() const {
  if (!finite) return false;
  for (const auto& g : groups)
    if (!(g.max_rel_error < tolerance)) return false;
  return true;
}

namespace {

using Mat = Matrix<double>;

/// Scalar objective: reduces non-scalar outputs with seeded weights.
double evaluate(const Objective& f, const std::vector<Mat>& inputs, std::uint64_t seed, ad::Tape<double>& tape,
                std::vector<ad::Var>& handles, ad::Var& root) {
  handles.clear();
  for (const auto& m : inputs) handles.push_back(tape.input(m));
  const ad::Var out = f(tape, handles);
  if (tape.rows(out) == 1 && tape.cols(out) == 1) {
    root = out;
  } else {
    std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Mat w(tape.rows(out), tape.cols(out));
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    root = ad::sum_all(tape, ad::mul(tape, out, tape.constant(std::move(w))));
  }
  return tape.value(root)(0, 0);
}

double value_only(const Objective& f, const std::vector<Mat>& inputs, std::uint64_t seed) {
  ad::Tape<double> tape(false);
  std::vector<ad::Var> h;
  ad::Var root;
  return evaluate(f, inputs, seed, tape, h, root);
}

std::vector<Index> pick_entries(Index size, std::size_t max_entries, std::mt19937_64& rng) {
  std::vector<Index> idx(static_cast<std::size_t>(size));
  std::iota(idx.begin(), idx.end(), Index{0});
  if (max_entries == 0 || idx.size() <= max_entries) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_entries);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kRelativeFloor});
}

}  // namespace

Report check(const std::string& name, const Objective& f, std::vector<Mat> inputs, ad::ParameterStore<double>* params,
             const Options& options) {
  Report report;
  report.name = name;
  report.tolerance = options.tolerance;

  ad::Tape<double> tape;
  std::vector<ad::Var> handles;
  ad::Var root;
  evaluate(f, inputs, options.seed, tape, handles, root);
  if (params != nullptr) params->zero_grad();
  tape.backward(root);

  std::map<std::string, GroupResult> groups;
  std::mt19937_64 rng(options.seed);
  const auto record = [&](const std::string& group, double analytic, double numeric) {
    auto& g = groups[group];
    g.group = group;
    ++g.checked;
    if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
      report.finite = false;
      return;
    }
    g.max_rel_error = std::max(g.max_rel_error, relative_error(analytic, numeric));
  };
  const double h = options.step;

  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Mat analytic = tape.grad(handles[t]);
    for (Index e : pick_entries(inputs[t].size(), options.max_entries, rng)) {
      const double orig = inputs[t].data()[e];
      inputs[t].data()[e] = orig + h;
      const double up = value_only(f, inputs, options.seed);
      inputs[t].data()[e] = orig - h;
      const double down = value_only(f, inputs, options.seed);
      inputs[t].data()[e] = orig;
      record("input", analytic.data()[e], (up - down) / (2 * h));
    }
  }
  if (params != nullptr) {
    for (std::size_t i = 0; i < params->size(); ++i) {
      auto& p = (*params)[i];
      const Mat analytic = p.grad;
      const std::string group = p.group == ad::ParamGroup::encoder ? "encoder" : "rest";
      for (Index e : pick_entries(p.value.size(), options.max_entries, rng)) {
        const double orig = p.value.data()[e];
        p.value.data()[e] = orig + h;
        const double up = value_only(f, inputs, options.seed);
        p.value.data()[e] = orig - h;
        const double down = value_only(f, inputs, options.seed);
        p.value.data()[e] = orig;
        record(group, analytic.data()[e], (up - down) / (2 * h));
      }
    }
  }
  for (auto& [_, g] : groups) report.groups.push_back(g);
  return report;
}

// ---------------------------------------------------------------------------
// Suite

namespace {

Mat random_matrix(std::mt19937_64& rng, Index rows, Index cols, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

std::vector<Eigen::Matrix3d> random_rotations(std::mt19937_64& rng, int n) {
  std::vector<Eigen::Matrix3d> out;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const geometry::Vec3 axis(u(rng), u(rng), u(rng) + 1.5);
    out.push_back(geometry::RotationMatrix::about_axis(axis, 3.0 * u(rng)).matrix());
  }
  return out;
}

render::StackConfig tiny_stack() {
  render::StackConfig s;
  s.stages = 1;
  s.heads = 2;
  s.pixel_dim = 4;
  s.semantic_dim = 6;
  s.points_per_ray = 3;
  s.ff_width = 6;
  s.pos_freqs = 1;
  return s;
}

Report linear_case() {
  std::mt19937_64 rng(1);
  return check(
      "linear",
      [](ad::Tape<double>& t, const std::vector<ad::Var>& in) { return ad::linear(t, in[0], in[1], in[2]); },
      {random_matrix(rng, 3, 4), random_matrix(rng, 4, 2), random_matrix(rng, 1, 2)}, nullptr);
}

Report calibrate_case() {
  std::mt19937_64 rng(2);
  const auto rot = random_rotations(rng, 3);
  return check(
      "calibrate",
      [rot](ad::Tape<double>& t, const std::vector<ad::Var>& in) { return core::calibrate(t, in[0], rot); },
      {random_matrix(rng, 3, 6)}, nullptr);
}

Report refine_case(core::CrossAttentionMode mode, const std::string& name) {
  std::mt19937_64 rng(3);
  ad::ParameterStore<double> store;
  core::RefinementConfig rc;
  rc.semantic_dim = 6;
  rc.heads = 2;
  rc.mode = mode;
  const core::RefinementBlock<double> block(rc, store, "refine", rng);
  return check(
      name,
      [&block](ad::Tape<double>& t, const std::vector<ad::Var>& in) {
        return ad::add(t, in[0], block.delta(t, in[0], in[1]));
      },
      {random_matrix(rng, 1, 6), random_matrix(rng, 3, 6)}, &store);
}

Report augment_case() {
  std::mt19937_64 rng(4);
  ad::ParameterStore<double> store;
  const render::SemanticAugment<double> aug(tiny_stack(), store, "augment", rng);
  return check(
      "augment_with_semantic",
      [&aug](ad::Tape<double>& t, const std::vector<ad::Var>& in) { return aug.apply(t, in[0], in[1]); },
      {random_matrix(rng, 5, 4), random_matrix(rng, 1, 6)}, &store);
}

Report view_case() {
  std::mt19937_64 rng(5);
  ad::ParameterStore<double> store;
  const auto cfg = tiny_stack();
  const render::ViewTransformer<double> view(cfg, store, "view", rng);
  const Index points = 3, views = 2, grid_rows = 6;
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 0};  // last point has no valid view
  ad::SparseRows<double> taps;
  std::uniform_int_distribution<Index> cell(0, grid_rows - 1);
  std::uniform_real_distribution<double> w(0.0, 1.0);
  for (Index r = 0; r < points * views; ++r) {
    if (mask[static_cast<std::size_t>(r)])
      for (int k = 0; k < 4; ++k) taps.add(cell(rng), w(rng));
    taps.finish_row();
  }
  const Index e = 2 * render::encoding_dim(cfg.pos_freqs);
  return check(
      "view_transformer",
      [&view, taps, mask, views](ad::Tape<double>& t, const std::vector<ad::Var>& in) {
        render::ViewInputs<double> vi;
        vi.grid = in[0];
        vi.taps = taps;
        vi.geometry = in[1];
        vi.point_encoding = in[2];
        vi.mask = mask;
        vi.views = views;
        return view.apply(t, in[3], vi);
      },
      {random_matrix(rng, grid_rows, cfg.pixel_dim), random_matrix(rng, points * views, render::kViewFeatureDim),
       random_matrix(rng, points, e), random_matrix(rng, points, cfg.pixel_dim)},
      &store);
}

Report ray_case() {
  std::mt19937_64 rng(6);
  ad::ParameterStore<double> store;
  const auto cfg = tiny_stack();
  const render::RayTransformer<double> ray(cfg, store, "ray", rng);
  return check(
      "ray_transformer",
      [&ray](ad::Tape<double>& t, const std::vector<ad::Var>& in) { return ray.apply(t, in[0], 3); },
      {random_matrix(rng, 6, cfg.pixel_dim)}, &store);
}

Report perceptual_case() {
  std::mt19937_64 rng(7);
  scene::Image truth(8, 8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : truth.data) v = u(rng);
  const train::FeatureNet<double> net(11, {4, 4, 4});
  const std::vector<Index> positions{3, 17, 30, 44, 62};
  return check(
      "perceptual_loss",
      [&](ad::Tape<double>& t, const std::vector<ad::Var>& in) {
        return train::perceptual_loss(t, in[0], positions, truth, net);
      },
      {random_matrix(rng, 5, 3, 0.5).array() + 0.5}, nullptr);
}

Report pipeline_case(const std::string& name, int stages, int points, int refs, bool semantic) {
  scene::SyntheticSceneSpec spec;
  spec.seed = 21;
  spec.camera_rig.count = 4;
  const auto bundle = scene::generate_synthetic_scene(spec, 8, 8);
  render::ModelConfig mc;
  mc.encoder.pixel_feature_dim = 4;
  mc.encoder.semantic_dim = 6;
  mc.encoder.downsample_stages = 1;
  mc.encoder.base_channels = 2;
  mc.encoder.seed = 3;
  mc.stack = tiny_stack();
  mc.stack.stages = stages;
  mc.stack.points_per_ray = points;
  mc.semantic.enabled = semantic;
  mc.semantic.heads = 2;
  render::CaesarModel<double> model(mc);
  const train::FeatureNet<double> net(11, {4, 4, 4});
  const auto references = train::choose_references(bundle, 0, refs, false);
  const std::vector<Index> pixels{9, 27, 36, 54};
  return check(
      name,
      [&](ad::Tape<double>& t, const std::vector<ad::Var>&) {
        return train::build_loss(t, model, bundle, 0, references, pixels, geometry::Sampling::midpoint(), net, 1.0,
                                 0.001)
            .total;
      },
      {}, &model.parameters());
}

}  // namespace

std::vector<std::string> suite_names() {
  return {"linear",          "calibrate",       "refine_step",     "refine_step_per_view_sum",
          "augment",         "view_transformer", "ray_transformer", "perceptual",
          "pipeline",        "pipeline_k2"};
}

std::vector<Report> run_suite(const std::string& scope) {
  std::vector<Report> out;
  const bool all = scope == "all";
  bool matched = false;
  const auto want = [&](const char* n) {
    const bool w = all || scope == n;
    matched = matched || w;
    return w;
  };
  if (want("linear")) out.push_back(linear_case());
  if (want("calibrate")) out.push_back(calibrate_case());
  if (want("refine_step")) out.push_back(refine_case(core::CrossAttentionMode::joint, "refine_step"));
  if (want("refine_step_per_view_sum"))
    out.push_back(refine_case(core::CrossAttentionMode::per_view_sum, "refine_step_per_view_sum"));
  if (want("augment")) out.push_back(augment_case());
  if (want("view_transformer")) out.push_back(view_case());
  if (want("ray_transformer")) out.push_back(ray_case());
  if (want("perceptual")) out.push_back(perceptual_case());
  if (want("pipeline")) out.push_back(pipeline_case("pipeline_k1_m1_n1", 1, 1, 1, true));
  if (want("pipeline_k2")) out.push_back(pipeline_case("pipeline_k2_m3_n2", 2, 3, 2, true));
  if (!matched) throw ArgumentError("unknown gradcheck scope '" + scope + "'");
  return out;
}

}  // namespace caesar::gradcheck
