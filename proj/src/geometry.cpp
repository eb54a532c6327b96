#include "caesar/geometry.hpp"

#include <cmath>
#include <random>
#include <string>

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "caesar/errors.hpp"

namespace caesar::geometry {

double RotationMatrix::orthonormality_error(const Mat3& m) {
  return (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
}

RotationMatrix RotationMatrix::from_matrix(const Mat3& m) {
  if (!m.allFinite()) throw InvalidPoseError("rotation contains non-finite entries");
  const double err = orthonormality_error(m);
  const double det = m.determinant();
  if (err <= kRotationTolerance && std::abs(det - 1.0) <= kRotationTolerance) return RotationMatrix(m);
  if (err <= kRepairTolerance && det > 0.0) {
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0.0) throw InvalidPoseError("rotation is a reflection");
    return RotationMatrix(r);
  }
  throw InvalidPoseError("rotation is not orthonormal (error " + std::to_string(err) +
                         ", det " + std::to_string(det) + ")");
}

RotationMatrix RotationMatrix::about_axis(const Vec3& axis, double radians) {
  if (axis.norm() == 0.0) throw ArgumentError("rotation axis must be non-zero");
  return RotationMatrix(Eigen::AngleAxisd(radians, axis.normalized()).toRotationMatrix());
}

RotationMatrix RotationMatrix::transpose() const { return RotationMatrix(Mat3(m_.transpose())); }

RotationMatrix RotationMatrix::operator*(const RotationMatrix& other) const {
  return RotationMatrix(Mat3(m_ * other.m_));
}

void Intrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw ArgumentError("focal lengths must be positive");
  if (!std::isfinite(cx) || !std::isfinite(cy)) throw ArgumentError("principal point must be finite");
}

void Camera::validate() const {
  intrinsics.validate();
  if (width < 1 || height < 1) throw ArgumentError("camera dimensions must be at least 1");
  if (!pose.translation.allFinite()) throw ArgumentError("camera translation must be finite");
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Intrinsics& k, int width,
                       int height) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(Vec3::UnitZ());
  if (right.norm() < 1e-12) throw ArgumentError("look_at: view direction parallel to up axis");
  right.normalize();
  const Vec3 down = forward.cross(right);
  Mat3 r;
  r.row(0) = right.transpose();
  r.row(1) = down.transpose();
  r.row(2) = forward.transpose();
  Camera cam;
  cam.pose.rotation = RotationMatrix::from_matrix(r);
  cam.pose.translation = -(cam.pose.rotation.matrix() * eye);
  cam.intrinsics = k;
  cam.width = width;
  cam.height = height;
  cam.validate();
  return cam;
}

bool cameras_equal(const Camera& a, const Camera& b, double tol) {
  if (a.width != b.width || a.height != b.height) return false;
  const auto close = [tol](double x, double y) { return std::abs(x - y) <= tol; };
  if (!close(a.intrinsics.fx, b.intrinsics.fx) || !close(a.intrinsics.fy, b.intrinsics.fy) ||
      !close(a.intrinsics.cx, b.intrinsics.cx) || !close(a.intrinsics.cy, b.intrinsics.cy))
    return false;
  if ((a.pose.rotation.matrix() - b.pose.rotation.matrix()).cwiseAbs().maxCoeff() > tol) return false;
  return (a.pose.translation - b.pose.translation).cwiseAbs().maxCoeff() <= tol;
}

RotationMatrix compose_relative_rotation(const Pose& target, const Pose& reference) {
  // Re-validate: poses built by hand may carry drifted rotations.
  const RotationMatrix t = RotationMatrix::from_matrix(target.rotation.matrix());
  const RotationMatrix r = RotationMatrix::from_matrix(reference.rotation.matrix());
  return RotationMatrix::from_matrix(t.matrix() * r.matrix().transpose());
}

Vec3 pixel_direction(const Camera& camera, double u, double v) {
  const auto& k = camera.intrinsics;
  const Vec3 cam((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
  return (camera.pose.rotation.matrix().transpose() * cam).normalized();
}

std::vector<Ray> generate_rays(const Camera& camera, std::span<const PixelCoord> pixels,
                               double near, double far) {
  if (!(near > 0.0) || !(far > near)) throw ArgumentError("rays require 0 < near < far");
  const Vec3 origin = camera.pose.center();
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& p : pixels) rays.push_back(Ray{origin, pixel_direction(camera, p.u, p.v), near, far});
  return rays;
}

std::vector<double> sample_depths(double near, double far, int count, const Sampling& sampling) {
  if (count < 1) throw ArgumentError("sample count must be at least 1");
  if (!(far > near)) throw ArgumentError("sampling requires near < far");
  const double width = (far - near) / count;
  std::vector<double> t(static_cast<std::size_t>(count));
  if (sampling.mode == SamplingMode::midpoint) {
    for (int i = 0; i < count; ++i) t[static_cast<std::size_t>(i)] = near + (i + 0.5) * width;
    return t;
  }
  std::mt19937_64 rng(sampling.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < count; ++i) t[static_cast<std::size_t>(i)] = near + (i + unit(rng)) * width;
  return t;
}

std::vector<SampledPoint> sample_points(const Ray& ray, int count, const Sampling& sampling) {
  const auto depths = sample_depths(ray.near, ray.far, count, sampling);
  std::vector<SampledPoint> points;
  points.reserve(depths.size());
  for (double t : depths) points.push_back(SampledPoint{ray.at(t), t, ray.direction});
  return points;
}

Projection project(const Vec3& point, const Camera& camera) {
  const Vec3 c = camera.pose.to_camera(point);
  Projection p;
  p.depth = c.z();
  if (!(c.z() > 0.0)) return p;
  const auto& k = camera.intrinsics;
  p.u = k.fx * c.x() / c.z() + k.cx;
  p.v = k.fy * c.y() / c.z() + k.cy;
  p.valid = p.u >= -0.5 && p.u <= camera.width - 0.5 && p.v >= -0.5 && p.v <= camera.height - 0.5;
  return p;
}

double angle_between(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

}  // namespace caesar::geometry
