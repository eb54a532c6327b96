#pragma once

// Variant grid over the semantic path: representation length, sequential
// refinement and calibration, plus the semantic-free baseline.

#include <functional>
#include <string>
#include <vector>

#include "caesar/config.hpp"

namespace caesar::ablation {

struct Variant {
  std::string name;
  bool semantic = false;
  int semantic_dim = 96;
  bool refine = false;
  bool calibrate = false;
  int pixel_extension = 0;  // extra per-pixel width for the "Ext." row
};

/// Rows in table order: Baseline, Ext., +32, +64, +96, +128, +96 Seq.,
/// +96 Cali., +96 Seq.+Cali.
std::vector<Variant> table_variants();
/// Throws ConfigError for unknown names.
const Variant& find_variant(const std::string& name);

render::ModelConfig apply_variant(render::ModelConfig model, const Variant& variant);

struct SeedResult {
  std::uint64_t seed = 0;
  double psnr = 0;
  double ssim = 0;
  double final_loss = 0;
  double seconds = 0;
};

struct Row {
  Variant variant;
  std::vector<SeedResult> runs;
  double mean_psnr = 0;
  double mean_ssim = 0;
};

struct Table {
  std::vector<Row> rows;
  config::json metadata;

  const Row* find(const std::string& name) const;
};

using Progress = std::function<void(const std::string&)>;

/// Trains every selected variant for every seed under the same budget,
/// then evaluates on the eval split with config.ablation.n_refs references.
Table run_ablation(const config::RunConfig& config, const config::SceneSplit& scenes, const Progress& progress = {});

config::json to_json(const Table& table);

}  // namespace caesar::ablation
