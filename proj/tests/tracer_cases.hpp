#pragma once

// Hand-built ray tracer cases with closed-form answers, shared by the unit
// and acceptance suites.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "caesar/scene.hpp"

namespace testing {

struct TracerCase {
  std::string name;
  caesar::scene::SyntheticGeometry geometry;
  caesar::geometry::Vec3 origin;
  caesar::geometry::Vec3 direction;
  std::optional<double> t;          // expected hit distance, none = miss
  caesar::geometry::Vec3 radiance;  // expected trace() result
};

/// Independent ray/sphere root: smallest t > 0 of |o + t d - c| = r.
inline std::optional<double> sphere_root(const caesar::geometry::Vec3& o, const caesar::geometry::Vec3& d,
                                         const caesar::geometry::Vec3& c, double r) {
  const double b = d.dot(o - c), cc = (o - c).squaredNorm() - r * r;
  const double disc = b * b - cc;
  if (disc < 0) return std::nullopt;
  const double s = std::sqrt(disc);
  if (-b - s > 1e-9) return -b - s;
  if (-b + s > 1e-9) return -b + s;
  return std::nullopt;
}

inline std::vector<TracerCase> tracer_cases() {
  using caesar::geometry::Vec3;
  using caesar::scene::Sphere;
  using caesar::scene::SyntheticGeometry;
  std::vector<TracerCase> cases;
  const Vec3 bg(0.2, 0.3, 0.5);
  const Vec3 up = Vec3::UnitZ();

  const auto base = [&](Vec3 light) {
    SyntheticGeometry g;
    g.background = bg;
    g.light = light.normalized();
    return g;
  };

  {  // head-on hit of a unit sphere, light from the camera side
    auto g = base(Vec3(0, 0, -1));
    g.spheres.push_back({Vec3(0, 0, 5), 1.0, Vec3(0.8, 0.4, 0.2)});
    cases.push_back({"sphere head-on", g, Vec3::Zero(), Vec3(0, 0, 1), 4.0, Vec3(0.8, 0.4, 0.2)});
  }
  {  // same sphere lit from the side: n = (0,0,-1), l = (1,0,0) -> black
    auto g = base(Vec3(1, 0, 0));
    g.spheres.push_back({Vec3(0, 0, 5), 1.0, Vec3(0.8, 0.4, 0.2)});
    cases.push_back({"sphere grazing light", g, Vec3::Zero(), Vec3(0, 0, 1), 4.0, Vec3::Zero()});
  }
  {  // miss beside the sphere
    auto g = base(up);
    g.spheres.push_back({Vec3(0, 0, 5), 1.0, Vec3(1, 1, 1)});
    cases.push_back({"sphere miss", g, Vec3::Zero(), Vec3(0.3, 0, 1).normalized(), std::nullopt, bg});
  }
  {  // oblique hit; normal at the hit point is (p - c) / r
    auto g = base(Vec3(0.3, 0.2, -0.93));
    g.spheres.push_back({Vec3(0.4, -0.2, 6), 1.5, Vec3(0.5, 0.6, 0.7)});
    const Vec3 d = Vec3(0.1, 0.05, 1).normalized();
    const double t = *sphere_root(Vec3::Zero(), d, Vec3(0.4, -0.2, 6), 1.5);
    const Vec3 n = (t * d - Vec3(0.4, -0.2, 6)) / 1.5;
    cases.push_back({"sphere oblique", g, Vec3::Zero(), d, t,
                     Vec3(0.5, 0.6, 0.7) * std::max(0.0, n.dot(g.light))});
  }
  {  // nearer of two spheres on the same line wins
    auto g = base(Vec3(0, 0, -1));
    g.spheres.push_back({Vec3(0, 0, 10), 1.0, Vec3(1, 0, 0)});
    g.spheres.push_back({Vec3(0, 0, 4), 0.5, Vec3(0, 1, 0)});
    cases.push_back({"occlusion", g, Vec3::Zero(), Vec3(0, 0, 1), 3.5, Vec3(0, 1, 0)});
  }
  {  // origin inside a sphere: hit the far wall, normal flipped to face the ray
    auto g = base(Vec3(0, 0, -1));
    g.spheres.push_back({Vec3::Zero(), 2.0, Vec3(0.3, 0.3, 0.3)});
    cases.push_back({"inside sphere", g, Vec3::Zero(), Vec3(0, 0, 1), 2.0, Vec3(0.3, 0.3, 0.3)});
  }
  {  // ground plane straight down from z = 3
    auto g = base(Vec3(0, 0, 1));
    g.ground_plane = true;
    g.ground_radius = 5.0;
    g.ground_albedo = Vec3(0.6, 0.5, 0.4);
    cases.push_back({"ground straight down", g, Vec3(1, 1, 3), Vec3(0, 0, -1), 3.0, Vec3(0.6, 0.5, 0.4)});
  }
  {  // oblique ground hit with a tilted light: t = -o_z / d_z, shade = a (n.l)
    auto g = base(Vec3(0.3, 0.2, 0.93));
    g.ground_plane = true;
    g.ground_radius = 5.0;
    g.ground_albedo = Vec3(0.6, 0.6, 0.6);
    const Vec3 d = Vec3(0.5, 0.2, -1).normalized();
    cases.push_back({"ground oblique", g, Vec3(0, 0, 2), d, -2.0 / d.z(),
                     Vec3(0.6, 0.6, 0.6) * g.light.z()});
  }
  {  // ground disk edge: the hit point lies outside the radius
    auto g = base(up);
    g.ground_plane = true;
    g.ground_radius = 1.0;
    g.ground_albedo = Vec3(1, 1, 1);
    cases.push_back({"ground outside disk", g, Vec3(0, 0, 1), Vec3(1, 0, -0.5).normalized(), std::nullopt, bg});
  }
  {  // sphere resting on the ground, seen from above: sphere top hides the ground
    auto g = base(Vec3(0, 0, 1));
    g.ground_plane = true;
    g.ground_radius = 5.0;
    g.ground_albedo = Vec3(0.1, 0.1, 0.1);
    g.spheres.push_back({Vec3(0, 0, 1), 1.0, Vec3(0.9, 0.8, 0.7)});
    cases.push_back({"sphere on ground", g, Vec3(0, 0, 5), Vec3(0, 0, -1), 3.0, Vec3(0.9, 0.8, 0.7)});
  }
  return cases;
}

}  // namespace testing
