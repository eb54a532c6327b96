#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "caesar/ablation.hpp"
#include "caesar/checkpoint.hpp"
#include "caesar/config.hpp"
#include "caesar/gradcheck.hpp"
#include "caesar/runtime.hpp"

namespace fs = std::filesystem;
using namespace caesar;
using config::json;

namespace {

constexpr int kUsageError = 1;
constexpr int kNumericError = 2;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::pair<std::string, std::string>> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config_path, "JSON run config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Seed");
  auto* out = cmd->add_option("--out", c.out, "Output directory");
  if (out_required) out->required();
  cmd->allow_extras();
  cmd->footer("Any config field can be overridden with a dotted flag, e.g. --train.lr_encoder 0.001");
}

/// Turns leftover "--a.b value" / "--a.b=value" arguments into overrides;
/// unknown paths are rejected when the overrides are applied.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() <= 2)
      throw ConfigError("unexpected argument '" + a + "'");
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("missing value for " + a);
      out.emplace_back(a.substr(2), extras[++i]);
    }
  }
  return out;
}

config::RunConfig effective_config(const Common& c) {
  auto cfg = config::load_run_config(c.config_path, c.overrides);
  if (c.seed) config::apply_seed(cfg, *c.seed);
  cfg.finalize();
  return cfg;
}

void echo_config(const config::RunConfig& cfg, const fs::path& out) {
  config::write_json(config::to_json(cfg), out / "config.json");
}

config::SceneSplit scenes_for(const std::string& data_dir, const config::RunConfig& cfg) {
  if (!data_dir.empty()) return config::load_split(data_dir);
  return config::generate_scenes(cfg.data);
}

std::string checkpoint_name(int iteration) {
  char name[32];
  std::snprintf(name, sizeof(name), "ckpt_%06d.bin", iteration);
  return name;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c) {
  auto cfg = effective_config(c);
  if (c.seed) cfg.data.seed = *c.seed;
  const fs::path out = c.out;
  const auto split = config::generate_scenes(cfg.data);
  config::save_split(split, out);
  echo_config(cfg, out);
  for (const auto& [key, scenes] : {std::pair{"train", &split.train}, std::pair{"eval", &split.eval}})
    for (std::size_t i = 0; i < scenes->size(); ++i)
      std::printf("%s/scene_%03zu  %s  %zu views  %dx%d\n", key, i, (*scenes)[i].name.c_str(),
                  (*scenes)[i].view_count(), cfg.data.width, cfg.data.height);
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string resume;
  std::optional<int> iterations;
};

/// Keeps the header and rows logged before `iteration`.
void truncate_log(const fs::path& path, int iteration) {
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (keep.empty()) {
      keep.push_back(line);
      continue;
    }
    if (std::stoi(line.substr(0, line.find(','))) < iteration) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

template <class T>
int run_training(const config::RunConfig& cfg, const config::SceneSplit& split, const fs::path& out,
                 const checkpoint::Archive* resume, const std::string& resume_path) {
  std::vector<train::TrainingScene> scenes;
  for (std::size_t i = 0; i < split.train.size(); ++i)
    scenes.push_back(train::make_training_scene(split.train[i], cfg.train.holdout_fraction, i));
  if (scenes.empty()) throw ConfigError("no training scenes");
  train::Trainer<T> trainer(cfg.model, cfg.train, std::move(scenes));

  const fs::path log_path = out / "loss.csv";
  std::string last_good = resume_path;
  if (resume != nullptr) {
    checkpoint::restore(*resume, trainer);
    if (fs::exists(log_path)) truncate_log(log_path, trainer.iteration());
  }
  const bool fresh_log = !fs::exists(log_path) || resume == nullptr;
  std::ofstream log(log_path, fresh_log ? std::ios::trunc : std::ios::app);
  if (!log) throw FormatError("cannot write " + log_path.string());
  if (fresh_log) log << "iteration,mse,central,perceptual,total,lr_encoder,lr_rest\n";

  const auto save = [&](int it) {
    const auto path = out / checkpoint_name(it);
    checkpoint::save(path, trainer, cfg);
    last_good = path.string();
  };
  if (resume == nullptr) save(0);

  const auto start = std::chrono::steady_clock::now();
  while (trainer.iteration() < cfg.train.iterations) {
    const int it = trainer.iteration();
    const auto [lr_enc, lr_rest] = train::lr_at(it, cfg.train);
    train::LossBreakdown b;
    try {
      b = trainer.train_step();
    } catch (const NumericError& e) {
      log.flush();
      std::cerr << "numeric failure: " << e.what() << "\n";
      std::cerr << "last good checkpoint: " << (last_good.empty() ? "(none)" : last_good) << "\n";
      return kNumericError;
    }
    char row[256];
    std::snprintf(row, sizeof(row), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", it, b.mse, b.central, b.perceptual,
                  b.total, lr_enc, lr_rest);
    log << row;
    const int done = trainer.iteration();
    if (done % cfg.log_every == 0 || done == cfg.train.iterations) {
      log.flush();
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::printf("iter %6d  mse %.6f  central %.6f  perceptual %.6f  total %.6f  (%.1f s)\n", done, b.mse, b.central,
                  b.perceptual, b.total, secs);
      std::fflush(stdout);
    }
    if (done % cfg.checkpoint_every == 0 || done == cfg.train.iterations) save(done);
  }
  std::printf("checkpoint: %s\n", last_good.c_str());
  return 0;
}

int cmd_train(const Common& c, const TrainArgs& a) {
  config::RunConfig cfg;
  std::optional<checkpoint::Archive> archive;
  if (!a.resume.empty()) {
    archive = checkpoint::read_archive(a.resume);
    json j = archive->manifest.at("config");
    for (const auto& [k, v] : c.overrides) config::apply_override(j, k, v);
    cfg = config::from_json(j);
    if (c.seed) throw ConfigError("--seed cannot be changed when resuming");
  } else {
    cfg = effective_config(c);
  }
  if (a.iterations) cfg.train.iterations = *a.iterations;
  cfg.finalize();
  const fs::path out = c.out;
  fs::create_directories(out);
  echo_config(cfg, out);
  const auto split = scenes_for(a.data, cfg);
  const auto* arch = archive ? &*archive : nullptr;
  return cfg.train.precision == train::Precision::dbl ? run_training<double>(cfg, split, out, arch, a.resume)
                                                      : run_training<float>(cfg, split, out, arch, a.resume);
}

struct RenderArgs {
  std::string checkpoint;
  std::string scene;
  std::vector<int> targets;
  int n_refs = 1;
  int batch = 256;
};

template <class T>
int run_render(const checkpoint::Archive& archive, const RenderArgs& a, const fs::path& out) {
  const auto model = checkpoint::load_model<T>(archive);
  const auto bundle = scene::load_scene(a.scene);
  std::vector<int> targets = a.targets;
  if (targets.empty())
    for (int v = 0; v < static_cast<int>(bundle.view_count()); ++v) targets.push_back(v);
  fs::create_directories(out);
  for (int t : targets) {
    if (t < 0 || t >= static_cast<int>(bundle.view_count()))
      throw ConfigError("target view " + std::to_string(t) + " out of range");
    const auto refs = train::choose_references(bundle, t, a.n_refs, false);
    const auto start = std::chrono::steady_clock::now();
    const auto image = render::render_image(*model, bundle.cameras[static_cast<std::size_t>(t)], refs, bundle.near,
                                            bundle.far, a.batch);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    char name[32];
    std::snprintf(name, sizeof(name), "view_%03d.ppm", t);
    scene::write_ppm(image, out / name);
    std::printf("%s  psnr %.3f dB  ssim %.4f  %.2f s\n", name,
                train::psnr(image, bundle.images[static_cast<std::size_t>(t)]),
                train::ssim(image, bundle.images[static_cast<std::size_t>(t)]), secs);
  }
  return 0;
}

int cmd_render(const Common& c, const RenderArgs& a) {
  const auto archive = checkpoint::read_archive(a.checkpoint);
  const bool dbl = archive.manifest.at("precision") == "f64";
  return dbl ? run_render<double>(archive, a, c.out) : run_render<float>(archive, a, c.out);
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::vector<int> n_refs;
};

template <class T>
json run_eval(const checkpoint::Archive& archive, const config::RunConfig& cfg, const config::SceneSplit& split,
              const std::vector<int>& n_refs) {
  const auto model = checkpoint::load_model<T>(archive);
  json results = json::array();
  for (int n : n_refs) {
    const auto start = std::chrono::steady_clock::now();
    const auto r = train::evaluate(*model, split.eval, n, cfg.eval.views_per_scene, cfg.eval.batch_size);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("n_refs %d  psnr %.3f dB  ssim %.4f  (%d images, %.1f s)\n", n, r.psnr, r.ssim, r.images, secs);
    results.push_back({{"n_refs", n}, {"psnr", r.psnr}, {"ssim", r.ssim}, {"images", r.images}});
  }
  return results;
}

int cmd_eval(const Common& c, const EvalArgs& a) {
  const auto archive = checkpoint::read_archive(a.checkpoint);
  json j = archive.manifest.at("config");
  for (const auto& [k, v] : c.overrides) config::apply_override(j, k, v);
  auto cfg = config::from_json(j);
  cfg.finalize();
  const auto split = scenes_for(a.data, cfg);
  if (split.eval.empty()) throw ConfigError("no eval scenes");
  const auto n_refs = a.n_refs.empty() ? cfg.eval.n_refs : a.n_refs;
  const bool dbl = archive.manifest.at("precision") == "f64";
  const json results = dbl ? run_eval<double>(archive, cfg, split, n_refs) : run_eval<float>(archive, cfg, split, n_refs);
  const fs::path out = c.out;
  echo_config(cfg, out);
  config::write_json({{"checkpoint", a.checkpoint},
                      {"iteration", archive.manifest.at("iteration")},
                      {"eval_scenes", split.eval.size()},
                      {"views_per_scene", cfg.eval.views_per_scene},
                      {"results", results}},
                     out / "metrics.json");
  return 0;
}

int cmd_ablate(const Common& c, const std::string& data) {
  const auto cfg = effective_config(c);
  const fs::path out = c.out;
  fs::create_directories(out);
  echo_config(cfg, out);
  const auto split = scenes_for(data, cfg);
  const auto table = ablation::run_ablation(cfg, split, [](const std::string& line) {
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
  });
  config::write_json(ablation::to_json(table), out / "ablation.json");
  std::printf("%-16s %8s %8s\n", "variant", "psnr", "ssim");
  for (const auto& r : table.rows) std::printf("%-16s %8.3f %8.4f\n", r.variant.name.c_str(), r.mean_psnr, r.mean_ssim);
  return 0;
}

int cmd_gradcheck(const Common& c, const std::string& scope) {
  const auto reports = gradcheck::run_suite(scope);
  bool ok = true;
  json rows = json::array();
  for (const auto& r : reports) {
    ok = ok && r.passed();
    std::printf("%-28s %s  max rel error %.3e\n", r.name.c_str(), r.passed() ? "pass" : "FAIL", r.max_error());
    json groups = json::object();
    for (const auto& g : r.groups) {
      std::printf("    %-8s %.3e  (%zu entries)\n", g.group.c_str(), g.max_rel_error, g.checked);
      groups[g.group] = {{"max_rel_error", g.max_rel_error}, {"checked", g.checked}};
    }
    rows.push_back({{"name", r.name}, {"passed", r.passed()}, {"finite", r.finite}, {"groups", groups}});
  }
  if (!c.out.empty())
    config::write_json({{"tolerance", gradcheck::kTolerance}, {"passed", ok}, {"checks", rows}},
                       fs::path(c.out) / "gradcheck.json");
  return ok ? 0 : kNumericError;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Few-shot neural rendering with calibrated scene semantics"};
  app.require_subcommand(1);

  Common gen, trn, ren, evl, abl, grd;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate synthetic train/eval scenes");
  add_common(gen_cmd, gen);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_common(train_cmd, trn);
  train_cmd->add_option("--data", train_args.data, "Scene directory from gen-data (default: generate)");
  train_cmd->add_option("--resume", train_args.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train_cmd->add_option("--iterations", train_args.iterations, "Total iterations");

  RenderArgs render_args;
  auto* render_cmd = app.add_subcommand("render", "Render views of a scene");
  add_common(render_cmd, ren);
  render_cmd->add_option("--checkpoint", render_args.checkpoint)->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--scene", render_args.scene, "Scene directory")->required()->check(CLI::ExistingDirectory);
  render_cmd->add_option("--target", render_args.targets, "Target view indices (default: all)");
  render_cmd->add_option("--n-refs", render_args.n_refs, "Reference views")->check(CLI::PositiveNumber);
  render_cmd->add_option("--batch", render_args.batch, "Rays per batch")->check(CLI::PositiveNumber);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the eval split");
  add_common(eval_cmd, evl);
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_args.data, "Scene directory from gen-data (default: generate)");
  eval_cmd->add_option("--n-refs", eval_args.n_refs, "Reference counts (default: eval.n_refs)");

  std::string ablate_data;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate the ablation grid");
  add_common(ablate_cmd, abl);
  ablate_cmd->add_option("--data", ablate_data, "Scene directory from gen-data (default: generate)");

  std::string scope = "all";
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  add_common(grad_cmd, grd, false);
  grad_cmd->add_option("--scope", scope, "all or one of the check names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    const auto run = [&](CLI::App* cmd, Common& c) {
      c.overrides = parse_overrides(cmd->remaining());
      return true;
    };
    if (gen_cmd->parsed() && run(gen_cmd, gen)) return cmd_gen_data(gen);
    if (train_cmd->parsed() && run(train_cmd, trn)) return cmd_train(trn, train_args);
    if (render_cmd->parsed() && run(render_cmd, ren)) return cmd_render(ren, render_args);
    if (eval_cmd->parsed() && run(eval_cmd, evl)) return cmd_eval(evl, eval_args);
    if (ablate_cmd->parsed() && run(ablate_cmd, abl)) return cmd_ablate(abl, ablate_data);
    if (grad_cmd->parsed() && run(grad_cmd, grd)) return cmd_gradcheck(grd, scope);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  }
  return kUsageError;
}
