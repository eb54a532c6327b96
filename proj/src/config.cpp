#include "caesar/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace caesar::config {

void DataConfig::validate() const {
  scene.validate();
  if (width < 1 || height < 1) throw ConfigError("data image size must be positive");
  if (train_scenes < 0 || eval_scenes < 0) throw ConfigError("scene counts must be >= 0");
}

void RunConfig::finalize() {
  model.finalize();
  train.validate();
  data.validate();
  if (eval.views_per_scene < 1 || eval.batch_size < 1) throw ConfigError("eval sizes must be >= 1");
  for (int n : eval.n_refs)
    if (n < 1) throw ConfigError("eval.n_refs entries must be >= 1");
  if (ablation.n_refs < 1 || ablation.views_per_scene < 1) throw ConfigError("ablation sizes must be >= 1");
  if (log_every < 1 || checkpoint_every < 1) throw ConfigError("log/checkpoint intervals must be >= 1");
}

void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.train.seed = seed;
  c.model.encoder.seed = 2 * seed;
  c.model.stack.seed = 2 * seed + 1;
}

SceneSplit generate_scenes(const DataConfig& data) {
  SceneSplit split;
  const int total = data.train_scenes + data.eval_scenes;
  for (int i = 0; i < total; ++i) {
    auto spec = data.scene;
    spec.seed = data.seed + static_cast<std::uint64_t>(i);
    auto bundle = scene::generate_synthetic_scene(spec, data.width, data.height);
    (i < data.train_scenes ? split.train : split.eval).push_back(std::move(bundle));
  }
  return split;
}

namespace {

std::string scene_dir_name(std::size_t i) {
  char name[32];
  std::snprintf(name, sizeof(name), "scene_%03zu", i);
  return name;
}

}  // namespace

void save_split(const SceneSplit& split, const std::filesystem::path& directory) {
  json manifest = {{"train", json::array()}, {"eval", json::array()}};
  for (const auto& [key, scenes] : {std::pair{"train", &split.train}, std::pair{"eval", &split.eval}}) {
    for (std::size_t i = 0; i < scenes->size(); ++i) {
      const auto rel = std::filesystem::path(key) / scene_dir_name(i);
      scene::save_scene((*scenes)[i], directory / rel);
      manifest[key].push_back({{"path", rel.generic_string()}, {"name", (*scenes)[i].name}});
    }
  }
  write_json(manifest, directory / "manifest.json");
}

SceneSplit load_split(const std::filesystem::path& directory) {
  const json manifest = read_json(directory / "manifest.json");
  SceneSplit split;
  for (const auto& [key, scenes] : {std::pair{"train", &split.train}, std::pair{"eval", &split.eval}}) {
    if (!manifest.contains(key) || !manifest[key].is_array())
      throw FormatError((directory / "manifest.json").string() + ": missing '" + key + "' list");
    for (const auto& entry : manifest[key])
      scenes->push_back(scene::load_scene(directory / entry.at("path").get<std::string>()));
  }
  return split;
}

namespace {

json vec3(const geometry::Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

geometry::Vec3 to_vec3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("expected a 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

const char* precision_name(train::Precision p) { return p == train::Precision::dbl ? "double" : "single"; }

train::Precision parse_precision(const std::string& s) {
  if (s == "single") return train::Precision::single;
  if (s == "double") return train::Precision::dbl;
  throw ConfigError("precision must be \"single\" or \"double\", got \"" + s + "\"");
}

const char* mode_name(core::CrossAttentionMode m) {
  return m == core::CrossAttentionMode::joint ? "joint" : "per_view_sum";
}

core::CrossAttentionMode parse_mode(const std::string& s) {
  if (s == "joint") return core::CrossAttentionMode::joint;
  if (s == "per_view_sum") return core::CrossAttentionMode::per_view_sum;
  throw ConfigError("cross_attention must be \"joint\" or \"per_view_sum\", got \"" + s + "\"");
}

void check_keys(const json& j, const json& reference, const std::string& path) {
  if (!reference.is_object()) return;
  if (!j.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!reference.contains(key)) throw ConfigError("unknown config key '" + here + "'");
    check_keys(value, reference[key], here);
  }
}

template <class V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace

json to_json(const RunConfig& c) {
  const auto& s = c.data.scene;
  json j;
  j["model"]["encoder"] = {{"pixel_feature_dim", c.model.encoder.pixel_feature_dim},
                           {"semantic_dim", c.model.encoder.semantic_dim},
                           {"downsample_stages", c.model.encoder.downsample_stages},
                           {"base_channels", c.model.encoder.base_channels},
                           {"seed", c.model.encoder.seed}};
  j["model"]["stack"] = {{"stages", c.model.stack.stages},       {"heads", c.model.stack.heads},
                         {"points_per_ray", c.model.stack.points_per_ray}, {"ff_width", c.model.stack.ff_width},
                         {"pos_freqs", c.model.stack.pos_freqs}, {"seed", c.model.stack.seed}};
  j["model"]["semantic"] = {{"enabled", c.model.semantic.enabled},
                            {"calibrate", c.model.semantic.calibrate},
                            {"refine", c.model.semantic.refine},
                            {"heads", c.model.semantic.heads},
                            {"cross_attention", mode_name(c.model.semantic.mode)}};
  j["train"] = {{"iterations", c.train.iterations},
                {"rays_per_iteration", c.train.rays_per_iteration},
                {"lr_encoder", c.train.lr_encoder},
                {"lr_rest", c.train.lr_rest},
                {"halve_every", c.train.halve_every},
                {"lambda_central", c.train.lambda_central},
                {"lambda_perceptual", c.train.lambda_perceptual},
                {"min_refs", c.train.min_refs},
                {"max_refs", c.train.max_refs},
                {"include_target", c.train.include_target},
                {"holdout_fraction", c.train.holdout_fraction},
                {"seed", c.train.seed},
                {"precision", precision_name(c.train.precision)}};
  j["data"] = {{"width", c.data.width},
               {"height", c.data.height},
               {"train_scenes", c.data.train_scenes},
               {"eval_scenes", c.data.eval_scenes},
               {"seed", c.data.seed}};
  j["data"]["scene"] = {{"sphere_count", s.sphere_count},
                        {"placement_extent", s.placement_extent},
                        {"radius_min", s.radius_min},
                        {"radius_max", s.radius_max},
                        {"albedo_min", s.albedo_min},
                        {"albedo_max", s.albedo_max},
                        {"ground_plane", s.ground_plane},
                        {"ground_radius", s.ground_radius},
                        {"ground_albedo", vec3(s.ground_albedo)},
                        {"background_color", vec3(s.background_color)},
                        {"light_direction", vec3(s.light_direction)}};
  j["data"]["scene"]["camera_rig"] = {{"radius", s.camera_rig.radius},
                                      {"elevation_min_deg", s.camera_rig.elevation_min_deg},
                                      {"elevation_max_deg", s.camera_rig.elevation_max_deg},
                                      {"count", s.camera_rig.count},
                                      {"fov_deg", s.camera_rig.fov_deg}};
  j["eval"] = {{"n_refs", c.eval.n_refs},
               {"views_per_scene", c.eval.views_per_scene},
               {"batch_size", c.eval.batch_size}};
  j["ablation"] = {{"variants", c.ablation.variants},
                   {"seeds", c.ablation.seeds},
                   {"n_refs", c.ablation.n_refs},
                   {"views_per_scene", c.ablation.views_per_scene}};
  j["log_every"] = c.log_every;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

RunConfig from_json(const json& j) {
  RunConfig c;
  check_keys(j, to_json(c), "");
  try {
    if (j.contains("model")) {
      const auto& m = j["model"];
      if (m.contains("encoder")) {
        const auto& e = m["encoder"];
        read(e, "pixel_feature_dim", c.model.encoder.pixel_feature_dim);
        read(e, "semantic_dim", c.model.encoder.semantic_dim);
        read(e, "downsample_stages", c.model.encoder.downsample_stages);
        read(e, "base_channels", c.model.encoder.base_channels);
        read(e, "seed", c.model.encoder.seed);
      }
      if (m.contains("stack")) {
        const auto& s = m["stack"];
        read(s, "stages", c.model.stack.stages);
        read(s, "heads", c.model.stack.heads);
        read(s, "points_per_ray", c.model.stack.points_per_ray);
        read(s, "ff_width", c.model.stack.ff_width);
        read(s, "pos_freqs", c.model.stack.pos_freqs);
        read(s, "seed", c.model.stack.seed);
      }
      if (m.contains("semantic")) {
        const auto& s = m["semantic"];
        read(s, "enabled", c.model.semantic.enabled);
        read(s, "calibrate", c.model.semantic.calibrate);
        read(s, "refine", c.model.semantic.refine);
        read(s, "heads", c.model.semantic.heads);
        if (s.contains("cross_attention")) c.model.semantic.mode = parse_mode(s["cross_attention"].get<std::string>());
      }
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      read(t, "iterations", c.train.iterations);
      read(t, "rays_per_iteration", c.train.rays_per_iteration);
      read(t, "lr_encoder", c.train.lr_encoder);
      read(t, "lr_rest", c.train.lr_rest);
      read(t, "halve_every", c.train.halve_every);
      read(t, "lambda_central", c.train.lambda_central);
      read(t, "lambda_perceptual", c.train.lambda_perceptual);
      read(t, "min_refs", c.train.min_refs);
      read(t, "max_refs", c.train.max_refs);
      read(t, "include_target", c.train.include_target);
      read(t, "holdout_fraction", c.train.holdout_fraction);
      read(t, "seed", c.train.seed);
      if (t.contains("precision")) c.train.precision = parse_precision(t["precision"].get<std::string>());
    }
    if (j.contains("data")) {
      const auto& d = j["data"];
      read(d, "width", c.data.width);
      read(d, "height", c.data.height);
      read(d, "train_scenes", c.data.train_scenes);
      read(d, "eval_scenes", c.data.eval_scenes);
      read(d, "seed", c.data.seed);
      if (d.contains("scene")) {
        const auto& s = d["scene"];
        auto& o = c.data.scene;
        read(s, "sphere_count", o.sphere_count);
        read(s, "placement_extent", o.placement_extent);
        read(s, "radius_min", o.radius_min);
        read(s, "radius_max", o.radius_max);
        read(s, "albedo_min", o.albedo_min);
        read(s, "albedo_max", o.albedo_max);
        read(s, "ground_plane", o.ground_plane);
        read(s, "ground_radius", o.ground_radius);
        if (s.contains("ground_albedo")) o.ground_albedo = to_vec3(s["ground_albedo"]);
        if (s.contains("background_color")) o.background_color = to_vec3(s["background_color"]);
        if (s.contains("light_direction")) o.light_direction = to_vec3(s["light_direction"]);
        if (s.contains("camera_rig")) {
          const auto& r = s["camera_rig"];
          read(r, "radius", o.camera_rig.radius);
          read(r, "elevation_min_deg", o.camera_rig.elevation_min_deg);
          read(r, "elevation_max_deg", o.camera_rig.elevation_max_deg);
          read(r, "count", o.camera_rig.count);
          read(r, "fov_deg", o.camera_rig.fov_deg);
        }
      }
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      read(e, "n_refs", c.eval.n_refs);
      read(e, "views_per_scene", c.eval.views_per_scene);
      read(e, "batch_size", c.eval.batch_size);
    }
    if (j.contains("ablation")) {
      const auto& a = j["ablation"];
      read(a, "variants", c.ablation.variants);
      read(a, "seeds", c.ablation.seeds);
      read(a, "n_refs", c.ablation.n_refs);
      read(a, "views_per_scene", c.ablation.views_per_scene);
    }
    read(j, "log_every", c.log_every);
    read(j, "checkpoint_every", c.checkpoint_every);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config type error: ") + e.what());
  }
  return c;
}

void apply_override(json& j, const std::string& path, const std::string& value) {
  json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty override path");
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) throw ConfigError("unknown config key '" + path + "'");
    node = &(*node)[parts[i]];
  }
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  *node = parsed;
}

RunConfig load_run_config(const std::filesystem::path& file,
                          const std::vector<std::pair<std::string, std::string>>& overrides) {
  json j = to_json(RunConfig{});
  if (!file.empty()) {
    const json user = read_json(file);
    check_keys(user, j, "");
    j.merge_patch(user);
  }
  for (const auto& [path, value] : overrides) apply_override(j, path, value);
  RunConfig c = from_json(j);
  c.finalize();
  return c;
}

void write_json(const json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw FormatError("failed writing " + path.string());
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("invalid JSON in " + path.string());
  return j;
}

}  // namespace caesar::config
