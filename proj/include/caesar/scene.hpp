#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "caesar/geometry.hpp"

namespace caesar::scene {

using geometry::Camera;
using geometry::Vec3;

/// H x W x 3 image, row-major, channel-interleaved, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, double fill = 0.0);

  double& at(int x, int y, int c) { return data[index(x, y, c)]; }
  double at(int x, int y, int c) const { return data[index(x, y, c)]; }
  Vec3 pixel(int x, int y) const { return {at(x, y, 0), at(x, y, 1), at(x, y, 2)}; }
  void set_pixel(int x, int y, const Vec3& rgb);
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool all_finite() const;

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * 3 + c;
  }
};

struct SceneBundle {
  std::string name;
  std::vector<Image> images;
  std::vector<Camera> cameras;
  double near = 0.0;
  double far = 1.0;

  /// Throws ArgumentError on any broken invariant.
  void validate() const;
  std::size_t view_count() const { return images.size(); }
};

struct CameraRig {
  double radius = 4.0;
  double elevation_min_deg = 20.0;
  double elevation_max_deg = 45.0;
  int count = 6;
  double fov_deg = 45.0;
};

struct SyntheticSceneSpec {
  std::uint64_t seed = 0;
  int sphere_count = 3;
  double placement_extent = 1.0;  // sphere centers in [-e, e]^2 on the ground
  double radius_min = 0.3;
  double radius_max = 0.6;
  double albedo_min = 0.1;
  double albedo_max = 0.9;
  bool ground_plane = true;
  double ground_radius = 2.5;
  Vec3 ground_albedo{0.6, 0.6, 0.6};
  Vec3 background_color{0.2, 0.3, 0.5};
  Vec3 light_direction{0.3, 0.2, 0.93};  // towards the light; normalized on use
  CameraRig camera_rig;

  void validate() const;
};

struct Sphere {
  Vec3 center;
  double radius = 1.0;
  Vec3 albedo;
};

struct Hit {
  double t = 0.0;
  Vec3 normal;  // front-facing unit normal
  Vec3 albedo;
};

/// Analytic scene: spheres plus an optional ground disk at z = 0, one
/// directional light, Lambertian shading and a constant background.
struct SyntheticGeometry {
  std::vector<Sphere> spheres;
  bool ground_plane = false;
  double ground_radius = 0.0;
  Vec3 ground_albedo = Vec3::Zero();
  Vec3 background = Vec3::Zero();
  Vec3 light = Vec3::UnitZ();  // unit, towards the light

  std::optional<Hit> intersect(const Vec3& origin, const Vec3& direction) const;
  /// Unquantized radiance along a ray.
  Vec3 trace(const Vec3& origin, const Vec3& direction) const;
  Vec3 centroid() const;
  /// Radius of a sphere about the origin enclosing all geometry.
  double bounding_radius() const;
};

SyntheticGeometry build_geometry(const SyntheticSceneSpec& spec);
std::vector<Camera> build_rig(const SyntheticSceneSpec& spec, const SyntheticGeometry& geometry,
                              int width, int height);
/// Traces pixel centers and quantizes to 8 bits (stored as k / 255).
Image render_view(const SyntheticGeometry& geometry, const Camera& camera);
SceneBundle generate_synthetic_scene(const SyntheticSceneSpec& spec, int width, int height);

double quantize_8bit(double v);

/// Directory with scene.json and one binary P6 PPM per view.
void save_scene(const SceneBundle& scene, const std::filesystem::path& directory);
SceneBundle load_scene(const std::filesystem::path& directory);

void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

/// Indices of the n pool cameras closest to target, scored by optical-axis
/// angle (radians) plus center distance over the rig diameter. Sorted by
/// score, ties by index.
std::vector<int> select_reference_views(const Camera& target, const std::vector<Camera>& pool, int n,
                                        bool exclude_identical);

}  // namespace caesar::scene
