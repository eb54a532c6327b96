#pragma once

// Pinhole cameras, rays, point sampling and projection.
//
// Conventions: right-handed, camera looks down +z with x right and y down.
// Poses are stored world-to-camera. Integer pixel coordinates address pixel
// centers, so the image rectangle is [-0.5, w - 0.5] x [-0.5, h - 0.5].

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace caesar::geometry {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kRotationTolerance = 1e-6;
inline constexpr double kRepairTolerance = 1e-4;

/// Proper rotation (orthonormal, det +1). Construction validates and
/// repairs small round-off by projecting onto the nearest rotation.
class RotationMatrix {
 public:
  RotationMatrix() : m_(Mat3::Identity()) {}

  /// Throws InvalidPoseError when the input is further than 1e-4 from a
  /// proper rotation.
  static RotationMatrix from_matrix(const Mat3& m);
  static RotationMatrix about_axis(const Vec3& axis, double radians);
  static RotationMatrix identity() { return {}; }

  const Mat3& matrix() const { return m_; }
  RotationMatrix transpose() const;
  RotationMatrix operator*(const RotationMatrix& other) const;
  Vec3 operator*(const Vec3& v) const { return m_ * v; }

  /// max |m^T m - I| entry.
  static double orthonormality_error(const Mat3& m);

 private:
  explicit RotationMatrix(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

/// World-to-camera rigid transform: x_cam = rotation * x_world + translation.
struct Pose {
  RotationMatrix rotation;
  Vec3 translation = Vec3::Zero();

  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
  Vec3 to_world(const Vec3& cam) const { return rotation.matrix().transpose() * (cam - translation); }
  /// Camera center in world coordinates.
  Vec3 center() const { return -(rotation.matrix().transpose() * translation); }
  /// Optical axis (+z of the camera) in world coordinates.
  Vec3 forward() const { return rotation.matrix().row(2).transpose(); }
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  void validate() const;
};

struct Camera {
  Pose pose;
  Intrinsics intrinsics;
  int width = 1;
  int height = 1;

  void validate() const;
  /// Look-at camera with world up +z. `eye` must not lie on the up axis
  /// through `target`.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Intrinsics& k, int width,
                        int height);
};

/// Elementwise equality of all camera fields within tol.
bool cameras_equal(const Camera& a, const Camera& b, double tol);

struct PixelCoord {
  double u = 0.0;
  double v = 0.0;
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double near = 0.0;
  double far = 1.0;

  Vec3 at(double t) const { return origin + t * direction; }
};

struct SampledPoint {
  Vec3 position;
  double t = 0.0;
  Vec3 ray_direction;
};

enum class SamplingMode { midpoint, stratified };

struct Sampling {
  SamplingMode mode = SamplingMode::midpoint;
  std::uint64_t seed = 0;

  static Sampling midpoint() { return {}; }
  static Sampling stratified(std::uint64_t seed) { return {SamplingMode::stratified, seed}; }
};

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
  bool valid = false;
};

/// target.rotation * reference.rotation^T: maps directions expressed in the
/// reference camera frame into the target camera frame.
RotationMatrix compose_relative_rotation(const Pose& target, const Pose& reference);

/// Unit direction in world space through continuous pixel (u, v).
Vec3 pixel_direction(const Camera& camera, double u, double v);

std::vector<Ray> generate_rays(const Camera& camera, std::span<const PixelCoord> pixels,
                               double near, double far);

/// Depths strictly increasing within [near, far]. Throws ArgumentError for
/// count == 0.
std::vector<SampledPoint> sample_points(const Ray& ray, int count, const Sampling& sampling);
/// Depth values only, same rules as sample_points.
std::vector<double> sample_depths(double near, double far, int count, const Sampling& sampling);

Projection project(const Vec3& point, const Camera& camera);

/// Angle in radians between two unit vectors, robust near 0 and pi.
double angle_between(const Vec3& a, const Vec3& b);

}  // namespace caesar::geometry
