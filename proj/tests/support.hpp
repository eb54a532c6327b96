#pragma once

// Random generators and small fixtures shared by the unit tests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>

#include "caesar/geometry.hpp"
#include "caesar/render.hpp"
#include "caesar/scene.hpp"

namespace testing {

using caesar::Index;
using caesar::Matrix;
using caesar::RowVector;
using caesar::geometry::Mat3;
using caesar::geometry::Vec3;

struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double uniform(double lo = -1.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
  Vec3 vec3(double scale = 1.0) { return {uniform(-scale, scale), uniform(-scale, scale), uniform(-scale, scale)}; }
  Vec3 unit3() {
    Vec3 v;
    do v = vec3();
    while (v.norm() < 1e-3 || v.norm() > 1.0);
    return v.normalized();
  }
  caesar::geometry::RotationMatrix rotation() {
    return caesar::geometry::RotationMatrix::about_axis(unit3(), uniform(-std::numbers::pi, std::numbers::pi));
  }
  template <class T = double>
  RowVector<T> row(Index n, double scale = 1.0) {
    RowVector<T> r(n);
    for (Index i = 0; i < n; ++i) r(i) = static_cast<T>(uniform(-scale, scale));
    return r;
  }
  template <class T = double>
  Matrix<T> matrix(Index rows, Index cols, double scale = 1.0) {
    Matrix<T> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(uniform(-scale, scale));
    return m;
  }
  caesar::geometry::Camera camera(int w = 48, int h = 32) {
    caesar::geometry::Camera c;
    c.pose.rotation = rotation();
    c.pose.translation = vec3(2.0);
    const double f = uniform(20.0, 80.0);
    c.intrinsics = {f, f * uniform(0.8, 1.2), uniform(0.3, 0.7) * w, uniform(0.3, 0.7) * h};
    c.width = w;
    c.height = h;
    return c;
  }
};

inline Mat3 rx(double deg) {
  return caesar::geometry::RotationMatrix::about_axis(Vec3::UnitX(), deg * std::numbers::pi / 180.0).matrix();
}
inline Mat3 rz(double deg) {
  return caesar::geometry::RotationMatrix::about_axis(Vec3::UnitZ(), deg * std::numbers::pi / 180.0).matrix();
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("caesar_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Small model that keeps forward passes in the millisecond range.
inline caesar::render::ModelConfig tiny_model(int stages = 2, int points = 4) {
  caesar::render::ModelConfig mc;
  mc.encoder.pixel_feature_dim = 8;
  mc.encoder.semantic_dim = 12;
  mc.encoder.downsample_stages = 2;
  mc.encoder.base_channels = 4;
  mc.stack.stages = stages;
  mc.stack.heads = 2;
  mc.stack.points_per_ray = points;
  mc.stack.ff_width = 16;
  mc.stack.pos_freqs = 2;
  mc.semantic.heads = 2;
  mc.finalize();
  return mc;
}

inline caesar::scene::SceneBundle small_scene(std::uint64_t seed = 3, int size = 16, int views = 4) {
  caesar::scene::SyntheticSceneSpec spec;
  spec.seed = seed;
  spec.camera_rig.count = views;
  return caesar::scene::generate_synthetic_scene(spec, size, size);
}

}  // namespace testing
