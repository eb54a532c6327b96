#include "doctest.h"

#include <fstream>
#include <numbers>
#include <set>

#include "caesar/errors.hpp"
#include "caesar/scene.hpp"
#include "json.hpp"
#include "support.hpp"
#include "tracer_cases.hpp"

using namespace caesar;
using namespace caesar::scene;
using testing::Gen;

TEST_SUITE("scene") {

TEST_CASE("tracer matches closed-form intersections") {
  for (const auto& c : testing::tracer_cases()) {
    CAPTURE(c.name);
    const auto hit = c.geometry.intersect(c.origin, c.direction);
    CHECK(hit.has_value() == c.t.has_value());
    if (hit && c.t) CHECK(std::abs(hit->t - *c.t) <= 1e-9);
    CHECK((c.geometry.trace(c.origin, c.direction) - c.radiance).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("empty scene renders the background everywhere") {
  SyntheticSceneSpec spec;
  spec.sphere_count = 0;
  spec.ground_plane = false;
  spec.background_color = {0.2, 0.4, 0.6};
  const auto s = generate_synthetic_scene(spec, 12, 10);
  for (const auto& img : s.images)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        for (int ch = 0; ch < 3; ++ch) CHECK(img.at(x, y, ch) == quantize_8bit(spec.background_color[ch]));
}

TEST_CASE("central pixel of a sphere on the optical axis") {
  SyntheticGeometry g;
  g.spheres.push_back({Vec3(0.1, -0.2, 0.5), 0.5, Vec3(0.7, 0.3, 0.9)});
  g.light = Vec3(0.3, 0.2, 0.93).normalized();
  const auto cam = Camera::look_at(Vec3(3, 1, 2), Vec3(0.1, -0.2, 0.5), {20, 20, 10, 10}, 21, 21);
  const auto img = render_view(g, cam);
  // Closed form along the axis: the hit is the sphere point nearest the eye.
  const Vec3 eye(3, 1, 2), c(0.1, -0.2, 0.5);
  const Vec3 n = (eye - c).normalized();
  const Vec3 expected = Vec3(0.7, 0.3, 0.9) * std::max(0.0, n.dot(g.light));
  for (int ch = 0; ch < 3; ++ch) CHECK(img.at(10, 10, ch) == quantize_8bit(expected[ch]));
}

TEST_CASE("generation is deterministic and matches the oracle") {
  SyntheticSceneSpec spec;
  spec.seed = 42;
  const auto a = generate_synthetic_scene(spec, 20, 16);
  const auto b = generate_synthetic_scene(spec, 20, 16);
  REQUIRE(a.images.size() == 6);
  const auto geometry = build_geometry(spec);
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    CHECK(a.images[i].data == b.images[i].data);
    CHECK(render_view(geometry, a.cameras[i]).data == a.images[i].data);
  }
  CHECK(a.near > 0);
  CHECK(a.near < a.far);
}

TEST_CASE("rig cameras look at the scene centroid and bracket geometry") {
  SyntheticSceneSpec spec;
  spec.seed = 7;
  const auto s = generate_synthetic_scene(spec, 16, 16);
  const auto g = build_geometry(spec);
  for (const auto& cam : s.cameras) {
    const auto p = geometry::project(g.centroid(), cam);
    CHECK(p.u == doctest::Approx(7.5).epsilon(1e-9));
    CHECK(p.v == doctest::Approx(7.5).epsilon(1e-9));
    const double d = cam.pose.center().norm();
    CHECK(s.near <= d - g.bounding_radius() + 1e-9);
    CHECK(s.far >= d + g.bounding_radius() - 1e-9);
  }
}

TEST_CASE("zero-camera rig is rejected") {
  SyntheticSceneSpec spec;
  spec.camera_rig.count = 0;
  CHECK_THROWS_AS(generate_synthetic_scene(spec, 8, 8), ArgumentError);
}

TEST_CASE("save and load roundtrip") {
  const auto s = testing::small_scene(5, 12, 3);
  const auto dir = testing::scratch_dir("scene_roundtrip");
  save_scene(s, dir);
  const auto t = load_scene(dir);
  CHECK(t.name == s.name);
  CHECK(t.near == s.near);
  CHECK(t.far == s.far);
  REQUIRE(t.images.size() == s.images.size());
  for (std::size_t i = 0; i < s.images.size(); ++i) {
    CHECK(t.images[i].data == s.images[i].data);
    CHECK(geometry::cameras_equal(t.cameras[i], s.cameras[i], 1e-9));
  }
}

namespace {

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "scene.json");
  return nlohmann::json::parse(in);
}

void write_manifest(const std::filesystem::path& dir, const nlohmann::json& j) {
  std::ofstream out(dir / "scene.json");
  out << j.dump();
}

std::string load_error(const std::filesystem::path& dir) {
  try {
    load_scene(dir);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("malformed manifests raise format errors naming the field") {
  const auto s = testing::small_scene(5, 8, 2);
  const auto dir = testing::scratch_dir("scene_bad");
  save_scene(s, dir);
  const auto good = read_manifest(dir);

  auto j = good;
  j["views"][1]["image"] = "missing.ppm";
  write_manifest(dir, j);
  CHECK(load_error(dir).find("image") != std::string::npos);

  j = good;
  j["views"][0]["rotation"] = {1, 0, 0, 0, 1, 0};
  write_manifest(dir, j);
  CHECK(load_error(dir).find("rotation") != std::string::npos);

  j = good;
  j["views"][0]["rotation"] = {1, 0.3, 0, 0, 1, 0, 0, 0, 1};
  write_manifest(dir, j);
  CHECK(load_error(dir).find("rotation") != std::string::npos);

  j = good;
  j["views"][0]["width"] = 9;
  write_manifest(dir, j);
  CHECK(load_error(dir).find("width") != std::string::npos);

  j = good;
  j["near"] = 5.0;
  j["far"] = 1.0;
  write_manifest(dir, j);
  CHECK(load_error(dir).find("near") != std::string::npos);
}

TEST_CASE("identical camera is its own nearest reference") {
  const auto s = testing::small_scene(9, 8, 6);
  CHECK(select_reference_views(s.cameras[3], s.cameras, 1, false) == std::vector<int>{3});
  const auto excluded = select_reference_views(s.cameras[3], s.cameras, 5, true);
  CHECK(std::find(excluded.begin(), excluded.end(), 3) == excluded.end());
  CHECK_THROWS_AS(select_reference_views(s.cameras[3], s.cameras, 6, true), ArgumentError);
}

TEST_CASE("nearest references on a circle") {
  const auto on_circle = [](double deg) {
    const double a = deg * std::numbers::pi / 180.0;
    return Camera::look_at(Vec3(4 * std::cos(a), 4 * std::sin(a), 1), Vec3::Zero(), {10, 10, 5, 5}, 10, 10);
  };
  const std::vector<Camera> pool{on_circle(0), on_circle(90), on_circle(10)};
  const Camera target = on_circle(5);
  // Scores by hand: optical-axis angle plus center distance over the
  // diameter of {pool, target} centers.
  double diameter = 0;
  std::vector<Vec3> centers;
  for (const auto& c : pool) centers.push_back(c.pose.center());
  centers.push_back(target.pose.center());
  for (const auto& a : centers)
    for (const auto& b : centers) diameter = std::max(diameter, (a - b).norm());
  std::vector<double> score;
  for (const auto& c : pool)
    score.push_back(std::acos(std::clamp(c.pose.forward().dot(target.pose.forward()), -1.0, 1.0)) +
                    (c.pose.center() - target.pose.center()).norm() / diameter);
  CHECK(score[0] < score[1]);
  CHECK(score[2] < score[1]);
  const auto got = select_reference_views(target, pool, 2, false);
  const std::set<int> got_set(got.begin(), got.end());
  CHECK(got_set == std::set<int>{0, 2});
  CHECK(select_reference_views(target, pool, 3, false).back() == 1);
}

TEST_CASE("reference selection is duplicate-free and score sorted") {
  Gen g(11);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Camera> pool;
    const int n = g.integer(2, 9);
    for (int i = 0; i < n; ++i) pool.push_back(g.camera(8, 8));
    const Camera target = g.camera(8, 8);
    const auto all = select_reference_views(target, pool, n, false);
    CHECK(std::set<int>(all.begin(), all.end()).size() == all.size());
    double diameter = 0;
    std::vector<Vec3> centers;
    for (const auto& c : pool) centers.push_back(c.pose.center());
    centers.push_back(target.pose.center());
    for (const auto& a : centers)
      for (const auto& b : centers) diameter = std::max(diameter, (a - b).norm());
    double prev = -1;
    for (int i : all) {
      const auto& c = pool[static_cast<std::size_t>(i)];
      const double s = geometry::angle_between(c.pose.forward(), target.pose.forward()) +
                       (c.pose.center() - target.pose.center()).norm() / diameter;
      CHECK(s >= prev - 1e-12);
      prev = s;
    }
  }
}

TEST_CASE("ppm roundtrip is exact for 8-bit values") {
  Image img(5, 4);
  Gen g(12);
  for (auto& v : img.data) v = g.integer(0, 255) / 255.0;
  const auto dir = testing::scratch_dir("ppm");
  write_ppm(img, dir / "a.ppm");
  CHECK(read_ppm(dir / "a.ppm").data == img.data);
}

}  // TEST_SUITE
