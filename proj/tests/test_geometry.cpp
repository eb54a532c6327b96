#include "doctest.h"

#include <algorithm>

#include <Eigen/LU>

#include "caesar/errors.hpp"
#include "caesar/geometry.hpp"
#include "support.hpp"

using namespace caesar;
using namespace caesar::geometry;
using testing::Gen;

TEST_SUITE("geometry") {

TEST_CASE("relative rotation of a pose with itself is the identity") {
  Gen g(1);
  for (int trial = 0; trial < 100; ++trial) {
    Pose p{g.rotation(), g.vec3(3.0)};
    const Mat3 r = compose_relative_rotation(p, p).matrix();
    CHECK((r - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("same-axis rotations compose additively") {
  Pose target;
  target.rotation = RotationMatrix::from_matrix(testing::rx(45));
  Pose reference;  // camera-to-world rotation Rx(45) means world-to-camera Rx(-45)
  reference.rotation = RotationMatrix::from_matrix(testing::rx(45).transpose());
  const Mat3 r = compose_relative_rotation(target, reference).matrix();
  CHECK((r - testing::rx(90)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("relative rotation of random poses is a proper rotation") {
  Gen g(2);
  for (int trial = 0; trial < 100; ++trial) {
    Pose a{g.rotation(), g.vec3()}, b{g.rotation(), g.vec3()};
    const Mat3 r = compose_relative_rotation(a, b).matrix();
    const Mat3 expected = a.rotation.matrix() * b.rotation.matrix().transpose();
    CHECK((r - expected).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("rotations are validated and lightly repaired") {
  Mat3 shear = Mat3::Identity();
  shear(0, 1) = 0.2;
  CHECK_THROWS_AS(RotationMatrix::from_matrix(shear), InvalidPoseError);
  CHECK_THROWS_AS(RotationMatrix::from_matrix(-Mat3::Identity()), InvalidPoseError);

  Mat3 nearly = testing::rz(30);
  nearly(0, 0) += 5e-5;
  const auto repaired = RotationMatrix::from_matrix(nearly);
  CHECK(RotationMatrix::orthonormality_error(repaired.matrix()) < 1e-12);
  CHECK((repaired.matrix() - testing::rz(30)).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("principal point ray is the optical axis") {
  Camera cam;
  cam.intrinsics = {50, 50, 20, 15};
  cam.width = 40;
  cam.height = 30;
  const PixelCoord px[] = {{20, 15}, {70, 15}};
  const auto rays = generate_rays(cam, px, 1.0, 2.0);
  CHECK((rays[0].direction - Vec3(0, 0, 1)).norm() < 1e-12);
  CHECK((rays[1].direction - Vec3(1, 0, 1).normalized()).norm() < 1e-12);
  CHECK(rays[0].origin.norm() < 1e-12);
}

TEST_CASE("ray origins sit at the camera center and directions are unit") {
  Gen g(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Camera cam = g.camera();
    std::vector<PixelCoord> px;
    for (int i = 0; i < 20; ++i) px.push_back({g.uniform(-10, 60), g.uniform(-10, 40)});
    for (const auto& r : generate_rays(cam, px, 0.5, 3.0)) {
      CHECK(std::abs(r.direction.norm() - 1.0) < 1e-12);
      CHECK((r.origin - cam.pose.center()).norm() < 1e-12);
    }
  }
}

TEST_CASE("midpoint sampling uses bin centers") {
  const auto t4 = sample_depths(1.0, 2.0, 4, Sampling::midpoint());
  const double expected[] = {1.125, 1.375, 1.625, 1.875};
  for (int i = 0; i < 4; ++i) CHECK(t4[static_cast<std::size_t>(i)] == doctest::Approx(expected[i]).epsilon(1e-15));
  const auto t1 = sample_depths(1.0, 2.0, 1, Sampling::midpoint());
  REQUIRE(t1.size() == 1);
  CHECK(t1[0] == doctest::Approx(1.5));
  CHECK_THROWS_AS(sample_depths(1.0, 2.0, 0, Sampling::midpoint()), ArgumentError);
}

TEST_CASE("stratified depths stay in their bins and increase strictly") {
  Gen g(4);
  for (int trial = 0; trial < 100; ++trial) {
    const double near = g.uniform(0.1, 2.0), far = near + g.uniform(0.1, 5.0);
    const int count = g.integer(1, 64);
    const auto seed = static_cast<std::uint64_t>(g.integer(0, 1 << 30));
    const auto t = sample_depths(near, far, count, Sampling::stratified(seed));
    REQUIRE(t.size() == static_cast<std::size_t>(count));
    const double bin = (far - near) / count;
    for (int i = 0; i < count; ++i) {
      const double ti = t[static_cast<std::size_t>(i)];
      CHECK(ti >= near + i * bin - 1e-12);
      CHECK(ti <= near + (i + 1) * bin + 1e-12);
      if (i > 0) CHECK(ti > t[static_cast<std::size_t>(i - 1)]);
    }
    CHECK(t == sample_depths(near, far, count, Sampling::stratified(seed)));
  }
}

TEST_CASE("sampled points lie on the ray") {
  Gen g(5);
  Ray r{g.vec3(), g.unit3(), 0.5, 4.0};
  for (const auto& mode : {Sampling::midpoint(), Sampling::stratified(9)}) {
    for (const auto& p : sample_points(r, 16, mode)) {
      CHECK((p.position - (r.origin + p.t * r.direction)).norm() < 1e-12);
      CHECK(p.t >= r.near);
      CHECK(p.t <= r.far);
      CHECK((p.ray_direction - r.direction).norm() == 0.0);
    }
  }
}

TEST_CASE("projection of simple points") {
  Camera cam;
  cam.intrinsics = {50, 50, 20, 15};
  cam.width = 40;
  cam.height = 30;
  const auto p = project({0, 0, 1}, cam);
  CHECK(p.u == doctest::Approx(20));
  CHECK(p.v == doctest::Approx(15));
  CHECK(p.depth == doctest::Approx(1));
  CHECK(p.valid);
  CHECK_FALSE(project({0, 0, -1}, cam).valid);
  CHECK_FALSE(project({10, 0, 1}, cam).valid);  // u = 520, outside
}

TEST_CASE("projection inverts ray generation") {
  Gen g(6);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Camera cam = g.camera();
    const PixelCoord px{g.uniform(0, cam.width - 1), g.uniform(0, cam.height - 1)};
    const auto ray = generate_rays(cam, std::span(&px, 1), 0.1, 10.0)[0];
    const double t = g.uniform(0.1, 10.0);
    const auto p = project(ray.at(t), cam);
    CHECK(p.valid);
    worst = std::max({worst, std::abs(p.u - px.u), std::abs(p.v - px.v)});
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("look-at cameras face their target") {
  Gen g(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 eye = g.vec3(5.0) + Vec3(0, 0, 6), target = g.vec3(0.5);
    const auto cam = Camera::look_at(eye, target, {30, 30, 15.5, 15.5}, 32, 32);
    CHECK((cam.pose.center() - eye).norm() < 1e-9);
    const auto p = project(target, cam);
    CHECK(p.u == doctest::Approx(15.5).epsilon(1e-9));
    CHECK(p.v == doctest::Approx(15.5).epsilon(1e-9));
  }
}

}  // TEST_SUITE
