#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "helpers.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Runs the CLI with `args` (already shell-quoted) and captures both streams.
Result run(const std::string& args) {
  static int counter = 0;
  const auto dir = fs::temp_directory_path() / "controlstyle_cli_io";
  fs::create_directories(dir);
  const auto out = dir / ("out" + std::to_string(counter) + ".txt");
  const auto err = dir / ("err" + std::to_string(counter++) + ".txt");
  const std::string cmd = std::string("\"") + CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

/// Tiny models and data so the whole pipeline runs in well under a minute.
constexpr const char* kTinyConfig = R"(seed = 3
threads = 1
image_size = 64
latent_channels = 4
data.scenes = 24
data.styles = 8
ae.base_channels = 8
ae.epochs = 1
ae.batch = 8
diffusion.T = 10
diffusion.beta_start = 1e-3
diffusion.beta_end = 0.2
text.dim = 16
unet.channels = 16, 24, 32
unet.time_dim = 32
unet.heads = 2
unet.groups = 4
base.steps = 4
base.batch = 8
base.log_every = 2
cs.iterations = 3
cs.batch = 2
cs.checkpoint_every = 2
cs.log_every = 1
edge.steps = 2
edge.batch = 4
eval.pairs = 2
eval.seeds = 1
)";

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = testutil::temp_dir("cli");
    std::ofstream(root_ / "tiny.conf") << kTinyConfig;
    for (const char* stage : {"gen-data", "train-ae", "train-base", "train-controlstyle",
                              "train-controlstyle --branch edge"}) {
      auto r = run(common() + " " + stage);
      ASSERT_EQ(r.code, 0) << stage << "\n" << r.err;
    }
  }
  static std::string common() {
    return "--config \"" + (root_ / "tiny.conf").string() + "\" --work \"" + (root_ / "work").string() + "\"";
  }
  static fs::path root_;
};

fs::path CliPipeline::root_;

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  auto r = run("frobnicate");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("sample"), std::string::npos);  // usage lists the subcommands
  EXPECT_EQ(run("sample --caption \"a red circle\" --no-such-flag").code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("sample").code, 2);  // --caption is required
  EXPECT_EQ(run("train-controlstyle --branch depth").code, 2);
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(run("--help").code, 0); }

TEST(Cli, MissingCheckpointNamesPath) {
  auto work = testutil::temp_dir("cli_empty");
  auto r = run("--work \"" + work.string() + "\" sample --caption \"a red circle\" --out \"" +
               (work / "x.png").string() + "\"");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("checkpoint not found"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find((work / "checkpoints" / "autoencoder.csarch").string()), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(work / "x.png"));
}

TEST(Cli, BadConfigExitsOne) {
  auto work = testutil::temp_dir("cli_badcfg");
  EXPECT_EQ(run("--config \"" + (work / "nope.conf").string() + "\" gen-data").code, 1);
  EXPECT_EQ(run("--set notakeyvalue gen-data").code, 1);
}

TEST_F(CliPipeline, StagesWroteArtifacts) {
  const auto work = root_ / "work";
  for (const char* p : {"checkpoints/autoencoder.csarch", "checkpoints/base.csarch", "checkpoints/style.csarch",
                        "checkpoints/edge.csarch", "logs/controlstyle_loss.jsonl", "runs/train-base.json",
                        "data/scenes.jsonl", "data/styles.jsonl"})
    EXPECT_TRUE(fs::exists(work / p)) << p;

  std::ifstream log(work / "logs/controlstyle_loss.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* k : {"step", "l_ldm", "l_style", "l_content", "l_adv", "l_total"})
      EXPECT_TRUE(j.contains(k)) << k;
    ++n;
  }
  EXPECT_EQ(n, 3);

  auto manifest = nlohmann::json::parse(slurp(work / "runs/train-controlstyle.json"));
  EXPECT_TRUE(manifest.contains("config_hash"));
  EXPECT_EQ(manifest.at("seed").get<uint64_t>(), 3u);
  ASSERT_FALSE(manifest.at("inputs").empty());
  for (const auto& in : manifest.at("inputs")) EXPECT_EQ(in.at("digest").get<std::string>().size(), 16u);
}

TEST_F(CliPipeline, SampleIsDeterministicPng) {
  const auto style = root_ / "work/data/styles/style_0003.png";
  ASSERT_TRUE(fs::exists(style));
  std::string png[2];
  for (int i = 0; i < 2; ++i) {
    const auto out = root_ / ("sample" + std::to_string(i) + ".png");
    auto r = run(common() + " sample --caption \"a red circle above a blue square\" --style \"" + style.string() +
                 "\" --seed 7 --out \"" + out.string() + "\"");
    ASSERT_EQ(r.code, 0) << r.err;
    png[i] = slurp(out);
    EXPECT_EQ(png[i].substr(1, 3), "PNG");
    EXPECT_TRUE(fs::exists(out.string() + ".manifest.json"));
  }
  EXPECT_EQ(png[0], png[1]);

  auto r = run(common() + " sample --caption \"a red circle above a blue square\" --seed 8 --out \"" +
               (root_ / "other.png").string() + "\"");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(slurp(root_ / "other.png"), png[0]);
}

TEST_F(CliPipeline, FuseAndInvert) {
  const auto style = root_ / "work/data/styles/style_0001.png";
  const auto edge = root_ / "work/data/edges/edge_00002.png";
  auto r = run(common() + " fuse --caption \"a green square\" --style \"" + style.string() + "\" --edge \"" +
               edge.string() + "\" --w-style 0.8 --w-edge 1.0 --seed 1 --out \"" + (root_ / "fused.png").string() +
               "\"");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root_ / "fused.png"));
  auto fm = nlohmann::json::parse(slurp(root_ / "fused.png.manifest.json"));
  EXPECT_EQ(fm.at("results").at("w_edge").get<double>(), 1.0);

  r = run(common() + " invert-style --style \"" + style.string() + "\" --steps 4 --blocks 1,2 --image-every 2" +
          " --out \"" + (root_ / "inv.png").string() + "\"");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root_ / "inv.png"));
  EXPECT_TRUE(fs::exists(root_ / "inv_step00002.png"));
  std::ifstream curve(root_ / "inv.png.losses.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(curve, line)) ++n;
  EXPECT_EQ(n, 5);

  EXPECT_EQ(run(common() + " fuse --caption \"a green square\" --style \"" + style.string() + "\" --edge \"" +
                (root_ / "missing.png").string() + "\"")
                .code,
            1);
}

TEST_F(CliPipeline, EvalWritesReport) {
  auto r = run(common() + " eval");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto work = root_ / "work";
  EXPECT_TRUE(fs::exists(work / "logs/eval.jsonl"));
  EXPECT_TRUE(fs::exists(work / "samples/eval_grid.png"));
  auto summary = nlohmann::json::parse(r.out);
  EXPECT_TRUE(summary.contains("style_ratio"));
}
