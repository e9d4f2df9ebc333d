// Black-box tests of the command-line tool. CTSFDA_CLI_PATH is injected by
// the build.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd =
      std::string(CTSFDA_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("ctsfda_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_tiny_config(const fs::path& path, const fs::path& out_dir) {
  std::ofstream cfg(path);
  cfg << "seed = 3\n"
      << "out = " << out_dir.string() << "\n"
      << "synth.classes = 2\n"
      << "synth.n_per_class = 5\n"
      << "synth.length = 16\n"
      << "reshape.h = 4\n"
      << "reshape.w = 4\n"
      << "model.unet.base = 2\n"
      << "model.unet.depth = 2\n"
      << "model.warp.hidden = 3\n"
      << "model.warp.code_dim = 2\n"
      << "model.warp.codebook = 4\n"
      << "model.backbone.w1 = 4\n"
      << "model.backbone.w2 = 4\n"
      << "model.backbone.w3 = 4\n"
      << "stages.s1.epochs = 1\n"
      << "stages.s2.epochs = 1\n"
      << "stages.s3.epochs = 1\n"
      << "train.batch_size = 4\n"
      << "tta.n = 2\n";
}

}  // namespace

TEST(CliSynth, WritesBothDomainsDeterministically) {
  auto a = fresh_dir("synth_a");
  auto b = fresh_dir("synth_b");
  const std::string args =
      "synth --classes 2 --n 4 --length 16 --seed 7 --out ";
  ASSERT_EQ(run(args + a.string()), 0);
  ASSERT_EQ(run(args + b.string()), 0);
  for (const char* domain : {"source", "target"})
    for (const char* file : {"manifest.json", "series.bin", "labels.bin"}) {
      const auto pa = a / domain / file, pb = b / domain / file;
      ASSERT_TRUE(fs::exists(pa)) << pa;
      EXPECT_EQ(slurp(pa), slurp(pb)) << domain << "/" << file;
    }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(CliSynth, SeedChangesOutput) {
  auto a = fresh_dir("synth_s7");
  auto b = fresh_dir("synth_s8");
  ASSERT_EQ(run("synth --classes 2 --n 4 --length 16 --seed 7 --out " +
                a.string()),
            0);
  ASSERT_EQ(run("synth --classes 2 --n 4 --length 16 --seed 8 --out " +
                b.string()),
            0);
  EXPECT_NE(slurp(a / "source" / "series.bin"),
            slurp(b / "source" / "series.bin"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(CliSynth, EnvSeedOverrideMatchesFlag) {
  auto a = fresh_dir("synth_env");
  auto b = fresh_dir("synth_flag");
  const std::string base = "synth --classes 2 --n 4 --length 16 --out ";
  {
    const std::string cmd = "CT_SFDA_SEED=11 " + std::string(CTSFDA_CLI_PATH) +
                            " " + base + a.string() + " > /dev/null 2>&1";
    ASSERT_EQ(WEXITSTATUS(std::system(cmd.c_str())), 0);
  }
  ASSERT_EQ(run(base + b.string() + " --seed 11"), 0);
  EXPECT_EQ(slurp(a / "source" / "series.bin"),
            slurp(b / "source" / "series.bin"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(CliErrors, MissingConfigFileExitsWithConfigError) {
  EXPECT_EQ(run("pretrain --config /nonexistent/nowhere.cfg"), 2);
  EXPECT_EQ(run("eval --config /nonexistent/nowhere.cfg"), 2);
}

TEST(CliErrors, AdaptBeforePretrainExitsWithConfigError) {
  auto ws = fresh_dir("adapt_first");
  write_tiny_config(ws / "run.cfg", ws / "out");
  EXPECT_EQ(run("adapt --config " + (ws / "run.cfg").string()), 2);
  fs::remove_all(ws);
}

TEST(CliErrors, InvalidConfigValueExitsWithConfigError) {
  auto ws = fresh_dir("bad_cfg");
  std::ofstream(ws / "run.cfg") << "tta.delta = -1\n";
  EXPECT_EQ(run("eval --config " + (ws / "run.cfg").string()), 2);
  fs::remove_all(ws);
}

TEST(CliPipeline, PretrainAdaptEvalAblateHappyPath) {
  auto ws = fresh_dir("pipeline");
  const auto cfg = ws / "run.cfg";
  const auto out = ws / "out";
  write_tiny_config(cfg, out);

  ASSERT_EQ(run("pretrain --config " + cfg.string()), 0);
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "theta" / "params.json"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "backbone" / "params.json"));
  EXPECT_TRUE(fs::exists(out / "config.hash"));
  EXPECT_TRUE(fs::exists(out / "run.json"));

  ASSERT_EQ(run("adapt --config " + cfg.string()), 0);
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "warp" / "params.json"));
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "scale" / "params.json"));

  ASSERT_EQ(run("eval --config " + cfg.string()), 0);
  bool scenario_found = false;
  for (const auto& e : fs::directory_iterator(out / "results"))
    if (fs::exists(e.path() / "scenario.json")) scenario_found = true;
  EXPECT_TRUE(scenario_found);

  ASSERT_EQ(run("ablate --config " + cfg.string() + " --suite loss"), 0);
  bool ablation_found = false;
  for (const auto& e : fs::directory_iterator(out / "results"))
    if (fs::exists(e.path() / "ablation.json")) ablation_found = true;
  EXPECT_TRUE(ablation_found);
  fs::remove_all(ws);
}

TEST(CliErrors, StaleCheckpointHashRejected) {
  auto ws = fresh_dir("stale_hash");
  const auto cfg = ws / "run.cfg";
  const auto out = ws / "out";
  write_tiny_config(cfg, out);
  ASSERT_EQ(run("pretrain --config " + cfg.string()), 0);
  // change a hyperparameter; the adapt stage must reject the stale artifacts
  std::ofstream(cfg, std::ios::app) << "adapt.lambda = 0.2\n";
  EXPECT_EQ(run("adapt --config " + cfg.string()), 2);
  fs::remove_all(ws);
}
