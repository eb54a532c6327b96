#pragma once

// Run configuration: JSON files merged with dotted flag overrides.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "caesar/render.hpp"
#include "caesar/scene.hpp"
#include "caesar/training.hpp"

namespace caesar::config {

using nlohmann::json;

struct DataConfig {
  scene::SyntheticSceneSpec scene;
  int width = 64;
  int height = 64;
  int train_scenes = 8;
  int eval_scenes = 2;
  /// Scene i of the train split uses seed + i; the eval split continues
  /// after the train split.
  std::uint64_t seed = 1000;

  void validate() const;
};

struct EvalConfig {
  std::vector<int> n_refs{1, 2, 3};
  int views_per_scene = 2;
  int batch_size = 256;
};

struct AblationConfig {
  std::vector<std::string> variants;  // empty = every variant
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int n_refs = 1;
  int views_per_scene = 2;
};

struct RunConfig {
  render::ModelConfig model;
  train::TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  AblationConfig ablation;
  int log_every = 50;
  int checkpoint_every = 1000;

  /// Finalizes the model config and validates everything.
  void finalize();
};

/// Sets the training seed and derives the model initialization seeds from it.
void apply_seed(RunConfig& config, std::uint64_t seed);

struct SceneSplit {
  std::vector<scene::SceneBundle> train;
  std::vector<scene::SceneBundle> eval;
};

SceneSplit generate_scenes(const DataConfig& data);

/// Layout: manifest.json plus train/scene_NNN and eval/scene_NNN scene
/// directories.
void save_split(const SceneSplit& split, const std::filesystem::path& directory);
SceneSplit load_split(const std::filesystem::path& directory);

json to_json(const RunConfig& config);
/// Strict conversion: unknown keys raise ConfigError naming the path.
RunConfig from_json(const json& j);

/// Sets `path` (dotted, e.g. "train.lr_encoder") to `value`. The value is
/// parsed as JSON when possible and kept as a string otherwise. Unknown
/// paths raise ConfigError.
void apply_override(json& j, const std::string& path, const std::string& value);

/// Defaults, then the file (if non-empty), then overrides in order.
RunConfig load_run_config(const std::filesystem::path& file,
                          const std::vector<std::pair<std::string, std::string>>& overrides);

void write_json(const json& j, const std::filesystem::path& path);
json read_json(const std::filesystem::path& path);

}  // namespace caesar::config
