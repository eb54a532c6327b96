#include "caesar/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"

#include "caesar/errors.hpp"

namespace caesar::scene {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kHitEpsilon = 1e-9;

double deg(double d) { return d * std::numbers::pi / 180.0; }

}  // namespace

// ---------------------------------------------------------------------------
// Image

Image::Image(int w, int h, double fill)
    : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {
  if (w < 1 || h < 1) throw ArgumentError("image dimensions must be at least 1");
}

void Image::set_pixel(int x, int y, const Vec3& rgb) {
  for (int c = 0; c < 3; ++c) at(x, y, c) = rgb[c];
}

bool Image::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

void SceneBundle::validate() const {
  if (images.empty()) throw ArgumentError("scene has no images");
  if (images.size() != cameras.size()) throw ArgumentError("scene image/camera count mismatch");
  if (!(near > 0.0) || !(far > near)) throw ArgumentError("scene requires 0 < near < far");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].width != images[0].width || images[i].height != images[0].height)
      throw ArgumentError("scene images differ in size");
    if (cameras[i].width != images[i].width || cameras[i].height != images[i].height)
      throw ArgumentError("camera dimensions do not match image " + std::to_string(i));
    cameras[i].validate();
  }
}

// ---------------------------------------------------------------------------
// Synthetic scenes

void SyntheticSceneSpec::validate() const {
  if (sphere_count < 0) throw ArgumentError("sphere_count must be >= 0");
  if (!(radius_min > 0.0) || radius_max < radius_min) throw ArgumentError("sphere radii must be positive");
  if (albedo_min < 0.0 || albedo_max > 1.0 || albedo_max < albedo_min)
    throw ArgumentError("albedo range must lie in [0, 1]");
  for (int c = 0; c < 3; ++c) {
    if (background_color[c] < 0.0 || background_color[c] > 1.0)
      throw ArgumentError("background color must lie in [0, 1]");
    if (ground_albedo[c] < 0.0 || ground_albedo[c] > 1.0)
      throw ArgumentError("ground albedo must lie in [0, 1]");
  }
  if (light_direction.norm() == 0.0) throw ArgumentError("light direction must be non-zero");
  if (camera_rig.count < 1) throw ArgumentError("camera rig must contain at least one camera");
  if (!(camera_rig.radius > 0.0)) throw ArgumentError("camera rig radius must be positive");
  if (!(camera_rig.fov_deg > 0.0 && camera_rig.fov_deg < 180.0))
    throw ArgumentError("camera field of view must be in (0, 180)");
  if (camera_rig.elevation_min_deg > camera_rig.elevation_max_deg ||
      camera_rig.elevation_max_deg >= 90.0 || camera_rig.elevation_min_deg <= -90.0)
    throw ArgumentError("camera elevation range must lie in (-90, 90)");
}

std::optional<Hit> SyntheticGeometry::intersect(const Vec3& o, const Vec3& d) const {
  std::optional<Hit> best;
  for (const auto& s : spheres) {
    const Vec3 oc = o - s.center;
    const double b = d.dot(oc);
    const double c = oc.squaredNorm() - s.radius * s.radius;
    const double disc = b * b - c;
    if (disc < 0.0) continue;
    const double root = std::sqrt(disc);
    double t = -b - root;
    if (t <= kHitEpsilon) t = -b + root;
    if (t <= kHitEpsilon) continue;
    if (best && t >= best->t) continue;
    Vec3 n = (o + t * d - s.center) / s.radius;
    if (n.dot(d) > 0.0) n = -n;
    best = Hit{t, n, s.albedo};
  }
  if (ground_plane && d.z() != 0.0) {
    const double t = -o.z() / d.z();
    if (t > kHitEpsilon && (!best || t < best->t)) {
      const Vec3 p = o + t * d;
      if (p.x() * p.x() + p.y() * p.y() <= ground_radius * ground_radius) {
        Vec3 n = Vec3::UnitZ();
        if (n.dot(d) > 0.0) n = -n;
        best = Hit{t, n, ground_albedo};
      }
    }
  }
  return best;
}

Vec3 SyntheticGeometry::trace(const Vec3& origin, const Vec3& direction) const {
  const auto hit = intersect(origin, direction);
  if (!hit) return background;
  return hit->albedo * std::max(0.0, hit->normal.dot(light));
}

Vec3 SyntheticGeometry::centroid() const {
  if (spheres.empty()) return Vec3::Zero();
  Vec3 c = Vec3::Zero();
  for (const auto& s : spheres) c += s.center;
  return c / static_cast<double>(spheres.size());
}

double SyntheticGeometry::bounding_radius() const {
  double r = ground_plane ? ground_radius : 0.0;
  for (const auto& s : spheres) r = std::max(r, s.center.norm() + s.radius);
  return r > 0.0 ? r : 1.0;
}

SyntheticGeometry build_geometry(const SyntheticSceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  SyntheticGeometry g;
  for (int i = 0; i < spec.sphere_count; ++i) {
    Sphere s;
    s.radius = uniform(spec.radius_min, spec.radius_max);
    const double x = uniform(-spec.placement_extent, spec.placement_extent);
    const double y = uniform(-spec.placement_extent, spec.placement_extent);
    s.center = Vec3(x, y, s.radius);
    for (int c = 0; c < 3; ++c) s.albedo[c] = uniform(spec.albedo_min, spec.albedo_max);
    g.spheres.push_back(s);
  }
  g.ground_plane = spec.ground_plane;
  g.ground_radius = spec.ground_radius;
  g.ground_albedo = spec.ground_albedo;
  g.background = spec.background_color;
  g.light = spec.light_direction.normalized();
  return g;
}

std::vector<Camera> build_rig(const SyntheticSceneSpec& spec, const SyntheticGeometry& geometry,
                              int width, int height) {
  spec.validate();
  if (width < 1 || height < 1) throw ArgumentError("image dimensions must be at least 1");
  const auto& rig = spec.camera_rig;
  // Separate stream from the geometry so rig changes do not move spheres.
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double phase = 2.0 * std::numbers::pi * unit(rng);
  const double f = 0.5 * width / std::tan(0.5 * deg(rig.fov_deg));
  geometry::Intrinsics k{f, f, 0.5 * (width - 1), 0.5 * (height - 1)};
  const Vec3 target = geometry.centroid();
  std::vector<Camera> cams;
  for (int i = 0; i < rig.count; ++i) {
    const double az = phase + 2.0 * std::numbers::pi * i / rig.count;
    const double el = deg(rig.elevation_min_deg +
                          (rig.elevation_max_deg - rig.elevation_min_deg) * unit(rng));
    const Vec3 eye = target + rig.radius * Vec3(std::cos(el) * std::cos(az),
                                                std::cos(el) * std::sin(az), std::sin(el));
    cams.push_back(Camera::look_at(eye, target, k, width, height));
  }
  return cams;
}

double quantize_8bit(double v) {
  return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

Image render_view(const SyntheticGeometry& geometry, const Camera& camera) {
  Image img(camera.width, camera.height);
  const Vec3 origin = camera.pose.center();
  for (int y = 0; y < camera.height; ++y)
    for (int x = 0; x < camera.width; ++x) {
      const Vec3 c = geometry.trace(origin, geometry::pixel_direction(camera, x, y));
      for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = quantize_8bit(c[ch]);
    }
  return img;
}

SceneBundle generate_synthetic_scene(const SyntheticSceneSpec& spec, int width, int height) {
  const SyntheticGeometry g = build_geometry(spec);
  SceneBundle scene;
  scene.name = "synthetic_" + std::to_string(spec.seed);
  scene.cameras = build_rig(spec, g, width, height);
  for (const auto& cam : scene.cameras) scene.images.push_back(render_view(g, cam));

  const double bound = g.bounding_radius();
  double nearest = std::numeric_limits<double>::infinity(), farthest = 0.0;
  for (const auto& cam : scene.cameras) {
    const double dist = cam.pose.center().norm();
    nearest = std::min(nearest, dist - bound);
    farthest = std::max(farthest, dist + bound);
  }
  scene.near = std::max(nearest, 0.05);
  scene.far = std::max(farthest, scene.near + 1.0);
  scene.validate();
  return scene;
}

// ---------------------------------------------------------------------------
// PPM

void write_ppm(const Image& image, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image: " + path.string());
  const auto token = [&in, &path]() {
    std::string tok;
    while (in >> std::ws && in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
    }
    if (!(in >> tok)) throw FormatError("truncated PPM header: " + path.string());
    return tok;
  };
  if (token() != "P6") throw FormatError("not a binary P6 PPM: " + path.string());
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::logic_error&) {
    throw FormatError("malformed PPM header: " + path.string());
  }
  if (w < 1 || h < 1 || maxval != 255) throw FormatError("unsupported PPM header: " + path.string());
  in.get();  // single whitespace byte before the raster
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw FormatError("truncated PPM raster: " + path.string());
  Image img(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

// ---------------------------------------------------------------------------
// scene.json

void save_scene(const SceneBundle& scene, const fs::path& directory) {
  scene.validate();
  fs::create_directories(directory);
  json views = json::array();
  for (std::size_t i = 0; i < scene.images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "view_%03zu.ppm", i);
    write_ppm(scene.images[i], directory / name);
    const auto& cam = scene.cameras[i];
    const auto& r = cam.pose.rotation.matrix();
    json rot = json::array();
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) rot.push_back(r(a, b));
    views.push_back({{"image", name},
                     {"width", cam.width},
                     {"height", cam.height},
                     {"fx", cam.intrinsics.fx},
                     {"fy", cam.intrinsics.fy},
                     {"cx", cam.intrinsics.cx},
                     {"cy", cam.intrinsics.cy},
                     {"rotation", rot},
                     {"translation",
                      {cam.pose.translation.x(), cam.pose.translation.y(), cam.pose.translation.z()}}});
  }
  json manifest{{"name", scene.name}, {"near", scene.near}, {"far", scene.far}, {"views", views}};
  std::ofstream out(directory / "scene.json");
  if (!out) throw FormatError("cannot write scene.json in " + directory.string());
  out << manifest.dump(2) << '\n';
}

namespace {

const json& field(const json& obj, const std::string& key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw FormatError(where + key + ": missing");
  return obj.at(key);
}

double number(const json& obj, const std::string& key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_number()) throw FormatError(where + key + ": expected a number");
  return v.get<double>();
}

int integer(const json& obj, const std::string& key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_number_integer()) throw FormatError(where + key + ": expected an integer");
  return v.get<int>();
}

std::vector<double> numbers(const json& obj, const std::string& key, std::size_t count,
                            const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_array() || v.size() != count)
    throw FormatError(where + key + ": expected " + std::to_string(count) + " values");
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number()) throw FormatError(where + key + ": expected numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

}  // namespace

SceneBundle load_scene(const fs::path& directory) {
  std::ifstream in(directory / "scene.json");
  if (!in) throw FormatError("scene.json: cannot open in " + directory.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("scene.json: ") + e.what());
  }
  SceneBundle scene;
  const json& name = field(manifest, "name", "");
  if (!name.is_string()) throw FormatError("name: expected a string");
  scene.name = name.get<std::string>();
  scene.near = number(manifest, "near", "");
  scene.far = number(manifest, "far", "");
  const json& views = field(manifest, "views", "");
  if (!views.is_array() || views.empty()) throw FormatError("views: expected a non-empty array");
  for (std::size_t i = 0; i < views.size(); ++i) {
    const std::string where = "views[" + std::to_string(i) + "].";
    const json& v = views[i];
    const json& image = field(v, "image", where);
    if (!image.is_string()) throw FormatError(where + "image: expected a relative path");
    geometry::Camera cam;
    cam.width = integer(v, "width", where);
    cam.height = integer(v, "height", where);
    cam.intrinsics = {number(v, "fx", where), number(v, "fy", where), number(v, "cx", where),
                      number(v, "cy", where)};
    const auto rot = numbers(v, "rotation", 9, where);
    const auto trans = numbers(v, "translation", 3, where);
    geometry::Mat3 r;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) r(a, b) = rot[static_cast<std::size_t>(a * 3 + b)];
    try {
      cam.pose.rotation = geometry::RotationMatrix::from_matrix(r);
      cam.pose.translation = geometry::Vec3(trans[0], trans[1], trans[2]);
      cam.validate();
    } catch (const ArgumentError& e) {
      throw FormatError(where + "rotation/intrinsics: " + e.what());
    }
    const fs::path image_path = directory / image.get<std::string>();
    if (!fs::exists(image_path)) throw FormatError(where + "image: missing file " + image_path.string());
    Image img;
    try {
      img = read_ppm(image_path);
    } catch (const FormatError& e) {
      throw FormatError(where + "image: " + e.what());
    }
    if (img.width != cam.width || img.height != cam.height)
      throw FormatError(where + "width/height: do not match the image file");
    if (!scene.images.empty() &&
        (img.width != scene.images[0].width || img.height != scene.images[0].height))
      throw FormatError(where + "width/height: differ from views[0]");
    scene.images.push_back(std::move(img));
    scene.cameras.push_back(cam);
  }
  if (!(scene.near > 0.0) || !(scene.far > scene.near))
    throw FormatError("near/far: require 0 < near < far");
  return scene;
}

// ---------------------------------------------------------------------------
// Reference selection

std::vector<int> select_reference_views(const Camera& target, const std::vector<Camera>& pool, int n,
                                        bool exclude_identical) {
  if (n < 1) throw ArgumentError("reference count must be at least 1");
  if (pool.empty()) throw ArgumentError("reference pool is empty");
  double diameter = 0.0;
  std::vector<Vec3> centers;
  for (const auto& c : pool) centers.push_back(c.pose.center());
  centers.push_back(target.pose.center());
  for (std::size_t i = 0; i < centers.size(); ++i)
    for (std::size_t j = i + 1; j < centers.size(); ++j)
      diameter = std::max(diameter, (centers[i] - centers[j]).norm());
  if (diameter <= 0.0) diameter = 1.0;

  const Vec3 tc = target.pose.center();
  const Vec3 tf = target.pose.forward();
  std::vector<std::pair<double, int>> scored;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (exclude_identical && geometry::cameras_equal(pool[i], target, 1e-9)) continue;
    const double score = geometry::angle_between(tf, pool[i].pose.forward()) +
                         (pool[i].pose.center() - tc).norm() / diameter;
    scored.emplace_back(score, static_cast<int>(i));
  }
  if (static_cast<int>(scored.size()) < n)
    throw ArgumentError("only " + std::to_string(scored.size()) + " reference candidates for n = " +
                        std::to_string(n));
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<int> out;
  for (int i = 0; i < n; ++i) out.push_back(scored[static_cast<std::size_t>(i)].second);
  return out;
}

}  // namespace caesar::scene
