#include "caesar/ablation.hpp"

#include <chrono>
#include <cmath>

namespace caesar::ablation {

std::vector<Variant> table_variants() {
  std::vector<Variant> v;
  v.push_back({"Baseline", false, 96, false, false, 0});
  v.push_back({"Ext.", false, 96, false, false, 64});
  for (int len : {32, 64, 96, 128}) v.push_back({"+" + std::to_string(len), true, len, false, false, 0});
  v.push_back({"+96 Seq.", true, 96, true, false, 0});
  v.push_back({"+96 Cali.", true, 96, false, true, 0});
  v.push_back({"+96 Seq.+Cali.", true, 96, true, true, 0});
  return v;
}

const Variant& find_variant(const std::string& name) {
  static const std::vector<Variant> all = table_variants();
  for (const auto& v : all)
    if (v.name == name) return v;
  throw ConfigError("unknown ablation variant '" + name + "'");
}

render::ModelConfig apply_variant(render::ModelConfig model, const Variant& variant) {
  model.semantic.enabled = variant.semantic;
  model.semantic.refine = variant.refine;
  model.semantic.calibrate = variant.calibrate;
  model.encoder.semantic_dim = variant.semantic_dim;
  model.encoder.pixel_feature_dim += variant.pixel_extension;
  model.finalize();
  return model;
}

const Row* Table::find(const std::string& name) const {
  for (const auto& r : rows)
    if (r.variant.name == name) return &r;
  return nullptr;
}

namespace {

template <class T>
SeedResult train_and_evaluate(const config::RunConfig& run, const std::vector<train::TrainingScene>& train_scenes,
                              const std::vector<scene::SceneBundle>& eval_scenes) {
  const auto start = std::chrono::steady_clock::now();
  train::Trainer<T> trainer(run.model, run.train, train_scenes);
  SeedResult r;
  r.seed = run.train.seed;
  for (int it = 0; it < run.train.iterations; ++it) r.final_loss = trainer.train_step().total;
  const auto eval = train::evaluate(trainer.model(), eval_scenes, run.ablation.n_refs, run.ablation.views_per_scene,
                                    run.eval.batch_size);
  r.psnr = eval.psnr;
  r.ssim = eval.ssim;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace

Table run_ablation(const config::RunConfig& config, const config::SceneSplit& scenes, const Progress& progress) {
  if (scenes.train.empty() || scenes.eval.empty()) throw ConfigError("ablation needs train and eval scenes");
  std::vector<Variant> variants;
  if (config.ablation.variants.empty()) {
    variants = table_variants();
  } else {
    for (const auto& name : config.ablation.variants) variants.push_back(find_variant(name));
  }
  if (config.ablation.seeds.empty()) throw ConfigError("ablation.seeds must not be empty");

  std::vector<train::TrainingScene> train_scenes;
  for (std::size_t i = 0; i < scenes.train.size(); ++i)
    train_scenes.push_back(train::make_training_scene(scenes.train[i], config.train.holdout_fraction, i));

  Table table;
  for (const auto& variant : variants) {
    Row row;
    row.variant = variant;
    for (auto seed : config.ablation.seeds) {
      auto run = config;
      config::apply_seed(run, seed);
      run.model = apply_variant(run.model, variant);
      const auto r = run.train.precision == train::Precision::dbl
                         ? train_and_evaluate<double>(run, train_scenes, scenes.eval)
                         : train_and_evaluate<float>(run, train_scenes, scenes.eval);
      if (!std::isfinite(r.psnr) || !std::isfinite(r.final_loss))
        throw NumericError("ablation variant " + variant.name + " produced a non-finite result");
      if (progress)
        progress(variant.name + " seed " + std::to_string(seed) + ": psnr " + std::to_string(r.psnr) + " ssim " +
                 std::to_string(r.ssim) + " (" + std::to_string(r.seconds) + " s)");
      row.runs.push_back(r);
    }
    for (const auto& r : row.runs) {
      row.mean_psnr += r.psnr;
      row.mean_ssim += r.ssim;
    }
    row.mean_psnr /= static_cast<double>(row.runs.size());
    row.mean_ssim /= static_cast<double>(row.runs.size());
    table.rows.push_back(std::move(row));
  }

  table.metadata = {{"seeds", config.ablation.seeds},
                    {"n_refs", config.ablation.n_refs},
                    {"views_per_scene", config.ablation.views_per_scene},
                    {"iterations", config.train.iterations},
                    {"rays_per_iteration", config.train.rays_per_iteration},
                    {"train_scenes", scenes.train.size()},
                    {"eval_scenes", scenes.eval.size()},
                    {"image_size", {config.data.width, config.data.height}},
                    {"stages", config.model.stack.stages},
                    {"points_per_ray", config.model.stack.points_per_ray},
                    {"precision", config.train.precision == train::Precision::dbl ? "double" : "single"}};
  return table;
}

config::json to_json(const Table& table) {
  config::json rows = config::json::object();
  config::json order = config::json::array();
  for (const auto& r : table.rows) {
    config::json runs = config::json::array();
    for (const auto& s : r.runs)
      runs.push_back({{"seed", s.seed},
                      {"psnr", s.psnr},
                      {"ssim", s.ssim},
                      {"final_loss", s.final_loss},
                      {"seconds", s.seconds}});
    rows[r.variant.name] = {{"semantic", r.variant.semantic},
                            {"semantic_length", r.variant.semantic ? r.variant.semantic_dim : 0},
                            {"seq", r.variant.refine},
                            {"cali", r.variant.calibrate},
                            {"pixel_extension", r.variant.pixel_extension},
                            {"psnr", r.mean_psnr},
                            {"ssim", r.mean_ssim},
                            {"runs", runs}};
    order.push_back(r.variant.name);
  }
  return {{"metadata", table.metadata}, {"order", order}, {"variants", rows}};
}

}  // namespace caesar::ablation
