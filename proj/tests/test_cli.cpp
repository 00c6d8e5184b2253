#include "mz/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(
enc.d_patch = 6
enc.dim = 8
enc.heads = 2
enc.layers = 1
enc.ffn = 16
enc.registers = 1
enc.proj_hidden = 12
enc.proj_bottleneck = 6
enc.prototypes = 16
case.layers = 1
case.heads = 2
case.ffn = 16
ssl.epochs = 1
ssl.micro_batch = 2
ssl.accum_steps = 2
ssl.global_crop = 6
ssl.local_crop = 3
ssl.local_crops = 2
ssl.max_attempts = 20
ssl.warmup_epochs = 0.5
align.epochs = 1
align.accum_steps = 4
align.k_max = 64
align.holdout = 0.2
eval.folds = 3
eval.mlp_epochs = 12
eval.linear_grid = 5
diag.repeats = 3
diag.k_list = 3
diag.attrib_slides = 1
synth.slides = 14
synth.grid_min = 10
synth.grid_max = 12
synth.d_patch = 6
synth.class_counts = 2
synth.survival_tasks = 1
)";

class CliPipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("mz_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    config_ = (root_ / "run.cfg").string();
    std::ofstream(config_) << kTinyConfig;
  }

  void TearDown() override { fs::remove_all(root_); }

  int run(std::vector<std::string> args) { return mz::cli::run_command(std::move(args)); }

  fs::path root_;
  std::string config_;
};

TEST_F(CliPipeline, UsageErrorsExitTwo) {
  EXPECT_EQ(run({"bogus"}), 2);
  EXPECT_EQ(run({"synth"}), 2);  // missing --out
  EXPECT_EQ(run({}), 2);
}

TEST_F(CliPipeline, FullPipelineProducesArtifacts) {
  const auto data = (root_ / "data").string();
  ASSERT_EQ(run({"synth", "--spec", config_, "--out", data, "--seed", "7"}), 0);
  EXPECT_TRUE(fs::exists(root_ / "data" / "tasks.txt"));
  EXPECT_TRUE(fs::exists(root_ / "data" / "cases.txt"));
  EXPECT_TRUE(fs::exists(root_ / "data" / "slide_00000.mzgr"));
  {
    std::ifstream in(root_ / "data" / "slide_00000.mzgr", std::ios::binary);
    auto g = mz::read_grid(in);
    EXPECT_EQ(g.d_patch, 6);
  }

  const auto ckpt = (root_ / "ckpt").string();
  ASSERT_EQ(run({"pretrain", "--config", config_, "--data", data, "--out", ckpt, "--seed", "7"}),
            0);
  EXPECT_TRUE(fs::exists(root_ / "ckpt" / "teacher.mzck"));
  EXPECT_TRUE(fs::exists(root_ / "ckpt" / "student.mzck"));
  {
    // Metrics stream: one record per optimizer step plus the header.
    std::ifstream in(root_ / "ckpt" / "metrics.txt");
    std::string line;
    int lines = 0, records = 0;
    while (std::getline(in, line)) {
      ++lines;
      if (!line.empty() && line[0] != '#') ++records;
    }
    EXPECT_EQ(records, 4);  // 14 slides / (2*2) per step, 1 epoch
  }

  const auto aligned = (root_ / "aligned").string();
  ASSERT_EQ(run({"align", "--config", config_, "--data", data, "--init",
                 (root_ / "ckpt" / "teacher.mzck").string(), "--out", aligned, "--seed", "7"}),
            0);
  EXPECT_TRUE(fs::exists(root_ / "aligned" / "model.mzck"));
  EXPECT_TRUE(fs::exists(root_ / "aligned" / "validation.txt"));

  const auto emb = (root_ / "emb.mzck").string();
  ASSERT_EQ(run({"embed", "--config", config_, "--data", data, "--init",
                 (root_ / "aligned" / "model.mzck").string(), "--out", emb, "--seed", "7"}),
            0);
  auto records = mz::nn::load_checkpoint_file(emb);
  int n_emb = 0;
  for (const auto& [name, t] : records)
    if (name.rfind("emb/", 0) == 0) {
      EXPECT_EQ(t.numel(), 8u);
      ++n_emb;
    }
  EXPECT_GT(n_emb, 8);

  const auto probe_dir = (root_ / "probe").string();
  ASSERT_EQ(run({"probe", "--config", config_, "--embeddings", emb, "--labels",
                 (root_ / "data" / "cases.txt").string(), "--protocol", "mlp", "--out", probe_dir,
                 "--seed", "7"}),
            0);
  EXPECT_TRUE(fs::exists(root_ / "probe" / "report.txt"));
  EXPECT_TRUE(fs::exists(root_ / "probe" / "report.csv"));
  {
    std::ifstream in(root_ / "probe" / "report.csv");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    EXPECT_NE(text.find("cls0, weighted_f1"), std::string::npos);
  }

  const auto diag_dir = (root_ / "diag").string();
  ASSERT_EQ(run({"diagnose", "--config", config_, "--embeddings", emb, "--out", diag_dir,
                 "--init", (root_ / "aligned" / "model.mzck").string(), "--data", data, "--seed",
                 "7"}),
            0);
  EXPECT_TRUE(fs::exists(root_ / "diag" / "compactness.csv"));
  EXPECT_TRUE(fs::exists(root_ / "diag" / "stability.csv"));
  bool any_pgm = false;
  for (const auto& entry : fs::directory_iterator(diag_dir))
    if (entry.path().extension() == ".pgm") any_pgm = true;
  EXPECT_TRUE(any_pgm);
}

TEST_F(CliPipeline, PipelineDeterministicUnderSeed) {
  auto run_once = [&](const std::string& tag) {
    const auto data = (root_ / ("data_" + tag)).string();
    EXPECT_EQ(run({"synth", "--spec", config_, "--out", data, "--seed", "11"}), 0);
    const auto ckpt = (root_ / ("ckpt_" + tag)).string();
    EXPECT_EQ(
        run({"pretrain", "--config", config_, "--data", data, "--out", ckpt, "--seed", "11"}), 0);
    const auto emb = (root_ / ("emb_" + tag + ".mzck")).string();
    EXPECT_EQ(run({"embed", "--config", config_, "--data", data, "--init", ckpt + "/teacher.mzck",
                   "--out", emb, "--seed", "11"}),
              0);
    std::ifstream in(emb, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  const std::string a = run_once("a");
  const std::string b = run_once("b");
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a, b);
}

TEST_F(CliPipeline, AtomicOutputsLeaveNoTempFiles) {
  const auto data = (root_ / "data").string();
  ASSERT_EQ(run({"synth", "--spec", config_, "--out", data, "--seed", "3"}), 0);
  for (const auto& entry : fs::directory_iterator(data))
    EXPECT_EQ(entry.path().extension() == ".tmp", false) << entry.path();
}

}  // namespace
