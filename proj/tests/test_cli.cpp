#include "doctest.h"

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "caesar/config.hpp"
#include "caesar/scene.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using caesar::config::json;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(CAESAR_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  return out;
}

/// Config file for a model and data set small enough for second-scale runs.
fs::path tiny_config(const fs::path& dir, bool dbl = true) {
  caesar::config::RunConfig rc;
  rc.model = testing::tiny_model();
  rc.train.rays_per_iteration = 16;
  rc.train.min_refs = 1;
  rc.train.max_refs = 2;
  rc.train.iterations = 4;
  rc.train.precision = dbl ? caesar::train::Precision::dbl : caesar::train::Precision::single;
  rc.data.width = rc.data.height = 12;
  rc.data.scene.camera_rig.count = 4;
  rc.data.train_scenes = 2;
  rc.data.eval_scenes = 1;
  rc.eval.views_per_scene = 1;
  rc.eval.batch_size = 64;
  rc.log_every = 1;
  rc.checkpoint_every = 2;
  rc.finalize();
  const auto path = dir / "tiny.json";
  caesar::config::write_json(caesar::config::to_json(rc), path);
  return path;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("gen-data is deterministic") {
  const auto dir = testing::scratch_dir("cli_gen");
  const auto cfg = tiny_config(dir);
  REQUIRE(run("gen-data --config " + cfg.string() + " --out " + (dir / "a").string(), dir / "a.log") == 0);
  REQUIRE(run("gen-data --config " + cfg.string() + " --out " + (dir / "b").string(), dir / "b.log") == 0);
  const auto a = tree(dir / "a"), b = tree(dir / "b");
  CHECK(a.size() > 8);
  CHECK(a == b);
  REQUIRE(run("gen-data --config " + cfg.string() + " --seed 77 --out " + (dir / "c").string(), dir / "c.log") == 0);
  CHECK(tree(dir / "c") != a);
}

TEST_CASE("gen-data with no spheres gives background and ground only") {
  const auto dir = testing::scratch_dir("cli_empty");
  const auto cfg = tiny_config(dir);
  REQUIRE(run("gen-data --config " + cfg.string() + " --data.scene.sphere_count 0 --data.scene.ground_plane false --out " +
                  (dir / "d").string(),
              dir / "d.log") == 0);
  const auto split = caesar::config::load_split(dir / "d");
  const auto bg = caesar::config::load_run_config(cfg, {}).data.scene.background_color;
  double worst = 0;
  for (const auto& scene : split.train)
    for (const auto& img : scene.images)
      for (std::size_t i = 0; i < img.data.size(); ++i) worst = std::max(worst, std::abs(img.data[i] - bg[i % 3]));
  // 8-bit storage
  CHECK(worst <= 0.5 / 255 + 1e-12);
}

TEST_CASE("exit codes") {
  const auto dir = testing::scratch_dir("cli_codes");
  const auto cfg = tiny_config(dir);
  CHECK(run("gen-data --config " + cfg.string() + " --train.nonsense 1 --out " + (dir / "x").string(), dir / "x.log") == 1);
  CHECK(slurp(dir / "x.log").find("train.nonsense") != std::string::npos);
  CHECK(run("gen-data --out " + (dir / "y").string() + " stray", dir / "y.log") == 1);
  CHECK(run("frobnicate", dir / "z.log") == 1);
  CHECK(run("gradcheck --scope calibrate --out " + dir.string(), dir / "g.log") == 0);
  CHECK(caesar::config::read_json(dir / "gradcheck.json").at("passed") == true);
  CHECK(run("gradcheck --scope no_such_check", dir / "h.log") == 1);
}

TEST_CASE("train with zero iterations writes the initial checkpoint only") {
  const auto dir = testing::scratch_dir("cli_zero");
  const auto cfg = tiny_config(dir);
  REQUIRE(run("train --config " + cfg.string() + " --iterations 0 --out " + (dir / "run").string(), dir / "t.log") == 0);
  std::vector<std::string> ckpts;
  for (const auto& e : fs::directory_iterator(dir / "run"))
    if (e.path().extension() == ".bin") ckpts.push_back(e.path().filename().string());
  CHECK(ckpts == std::vector<std::string>{"ckpt_000000.bin"});
  CHECK(slurp(dir / "run" / "loss.csv") == "iteration,mse,central,perceptual,total,lr_encoder,lr_rest\n");
}

TEST_CASE("resumed training continues the loss log bit for bit") {
  const auto dir = testing::scratch_dir("cli_resume");
  const auto cfg = tiny_config(dir);
  REQUIRE(run("train --config " + cfg.string() + " --out " + (dir / "full").string(), dir / "f.log") == 0);
  REQUIRE(run("train --config " + cfg.string() + " --iterations 2 --out " + (dir / "part").string(), dir / "p.log") == 0);
  REQUIRE(run("train --resume " + (dir / "part" / "ckpt_000002.bin").string() + " --iterations 4 --out " +
                  (dir / "part").string(),
              dir / "r.log") == 0);
  const auto full = slurp(dir / "full" / "loss.csv");
  CHECK(std::count(full.begin(), full.end(), '\n') == 5);
  CHECK(slurp(dir / "part" / "loss.csv") == full);
  CHECK(slurp(dir / "part" / "ckpt_000004.bin") == slurp(dir / "full" / "ckpt_000004.bin"));
}

TEST_CASE("render and eval") {
  const auto dir = testing::scratch_dir("cli_render");
  const auto cfg = tiny_config(dir, false);
  REQUIRE(run("gen-data --config " + cfg.string() + " --out " + (dir / "data").string(), dir / "g.log") == 0);
  REQUIRE(run("train --config " + cfg.string() + " --iterations 1 --data " + (dir / "data").string() + " --out " +
                  (dir / "run").string(),
              dir / "t.log") == 0);
  const auto ckpt = (dir / "run" / "ckpt_000001.bin").string();
  const auto scene = (dir / "data" / "eval" / "scene_000").string();
  REQUIRE(run("render --checkpoint " + ckpt + " --scene " + scene + " --target 1 --n-refs 1 --out " +
                  (dir / "r1").string(),
              dir / "r1.log") == 0);
  REQUIRE(run("render --checkpoint " + ckpt + " --scene " + scene + " --target 1 --n-refs 1 --batch 7 --out " +
                  (dir / "r2").string(),
              dir / "r2.log") == 0);
  CHECK(slurp(dir / "r1" / "view_001.ppm") == slurp(dir / "r2" / "view_001.ppm"));
  const auto img = caesar::scene::read_ppm(dir / "r1" / "view_001.ppm");
  CHECK(img.width == 12);
  CHECK(img.height == 12);
  CHECK(slurp(dir / "r1.log").find("psnr") != std::string::npos);
  CHECK(run("render --checkpoint " + ckpt + " --scene " + scene + " --target 9 --out " + (dir / "r3").string(),
            dir / "r3.log") == 1);

  REQUIRE(run("eval --checkpoint " + ckpt + " --data " + (dir / "data").string() + " --out " + (dir / "ev").string(),
              dir / "e.log") == 0);
  const auto metrics = caesar::config::read_json(dir / "ev" / "metrics.json");
  REQUIRE(metrics.at("results").size() == 3);
  for (int i = 0; i < 3; ++i) {
    const auto& r = metrics["results"][static_cast<std::size_t>(i)];
    CHECK(r.at("n_refs") == i + 1);
    CHECK(r.at("psnr").get<double>() > 0.0);
    CHECK(r.at("images") == 1);
  }
}

}  // TEST_SUITE
