// Black-box tests for the command-line tool. Each test shells out to the
// built binary and inspects exit codes and the files it leaves behind.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "sknas/arch_spec.hpp"
#include "sknas/checkpoint.hpp"
#include "sknas/config.hpp"
#include "sknas/data.hpp"

namespace fs = std::filesystem;
using namespace sknas;

namespace {

int run(const std::string& args, const std::string& stderr_file = "/dev/null") {
  const std::string cmd = std::string(SKNAS_CLI_PATH) + " " + args + " 2>" + stderr_file;
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTinyModel =
    "--depth 1 --base-channels 4 --blocks 1 --kernel-candidates 1,3 "
    "--growth-rates 0.5,1.0 --skip-init";
const char* kTinyTrain =
    "--steps 10 --eval-interval 5 --lr 1e-3 --patch 8 --batch 2 --seed 7";

class CliTest : public ::testing::Test {
 protected:
  fs::path dir_;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("sknas_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string data_dir() const { return (dir_ / "ds").string(); }
  std::string manifest() const { return (dir_ / "ds" / "manifest.txt").string(); }

  void make_dataset(int count = 10) {
    ASSERT_EQ(0, run("gen-data --out " + data_dir() + " --count " +
                     std::to_string(count) + " --size 16 --sigma 0.1 --seed 3"));
  }

  std::string search_into(const std::string& name, const std::string& extra = "") {
    const std::string out = (dir_ / name).string();
    EXPECT_EQ(0, run("search --data " + manifest() + " --out " + out + " " + kTinyModel +
                     " " + kTinyTrain + " --variant joint " + extra));
    return out;
  }
};

TEST_F(CliTest, GenDataWritesALoadableDataset) {
  make_dataset(9);
  const auto items = load_dataset(manifest());
  EXPECT_EQ(items.size(), 9u);
  EXPECT_EQ(items[0].clean.dim(1), 16);
}

TEST_F(CliTest, GenDataRefusesToClobberWithoutForce) {
  make_dataset(4);
  const auto err = dir_ / "err.txt";
  EXPECT_NE(0, run("gen-data --out " + data_dir() + " --count 4 --size 16",
                   err.string()));
  EXPECT_NE(slurp(err).find("--force"), std::string::npos);
  EXPECT_EQ(0, run("gen-data --out " + data_dir() + " --count 4 --size 16 --force"));
}

TEST_F(CliTest, SearchProducesCheckpointReportAndConfig) {
  make_dataset();
  const fs::path out = search_into("run");

  const auto loaded = load_checkpoint((out / "search_checkpoint.skcp").string());
  EXPECT_FALSE(loaded.distilled());
  EXPECT_TRUE(loaded.model.has_superkernels());

  const RunConfig cfg = parse_run_config(slurp(out / "config.json"));
  EXPECT_EQ(cfg.model.depth, 1);
  EXPECT_EQ(cfg.model.base_channels, 4);
  EXPECT_EQ(cfg.train.max_steps, 10);

  const std::string report = slurp(out / "search_report.txt");
  EXPECT_NE(report.find("best_step"), std::string::npos);
  EXPECT_NE(report.find("eval step=5"), std::string::npos);
}

TEST_F(CliTest, SearchRefusesToClobberWithoutForce) {
  make_dataset();
  const fs::path out = search_into("run");
  EXPECT_NE(0, run("search --data " + manifest() + " --out " + out.string() + " " +
                   kTinyModel + " " + kTinyTrain));
  EXPECT_EQ(0, run("search --data " + manifest() + " --out " + out.string() + " " +
                   kTinyModel + " " + kTinyTrain + " --force"));
}

TEST_F(CliTest, IdenticalInvocationsProduceIdenticalArtifacts) {
  make_dataset();
  const fs::path a = search_into("a");
  const fs::path b = search_into("b");
  EXPECT_EQ(slurp(a / "search_checkpoint.skcp"), slurp(b / "search_checkpoint.skcp"));
  EXPECT_EQ(slurp(a / "search_report.txt"), slurp(b / "search_report.txt"));
  EXPECT_EQ(slurp(a / "config.json"), slurp(b / "config.json"));
}

TEST_F(CliTest, DistillFinetuneEvalRoundTrip) {
  make_dataset();
  const fs::path out = search_into("run");
  const std::string ckpt = (out / "search_checkpoint.skcp").string();

  ASSERT_EQ(0, run("distill --checkpoint " + ckpt + " --out " + out.string()));
  const std::string arch_text = slurp(out / "architecture.txt");
  const ArchitectureSpec arch = ArchitectureSpec::from_text(arch_text);
  EXPECT_FALSE(arch.empty());

  const std::string distilled = (out / "distilled_checkpoint.skcp").string();
  EXPECT_TRUE(load_checkpoint(distilled).distilled());

  // A distilled checkpoint cannot be distilled again.
  const auto err = dir_ / "err.txt";
  EXPECT_NE(0, run("distill --checkpoint " + distilled + " --out " + out.string() +
                   " --force", err.string()));
  EXPECT_NE(slurp(err).find("already distilled"), std::string::npos);

  ASSERT_EQ(0, run("finetune --checkpoint " + distilled + " --data " + manifest() +
                   " --out " + out.string() + " " + kTinyTrain));
  const std::string tuned = (out / "finetuned_checkpoint.skcp").string();
  EXPECT_TRUE(load_checkpoint(tuned).distilled());

  const std::string report = (out / "eval_report.txt").string();
  ASSERT_EQ(0, run("eval --checkpoint " + tuned + " --data " + manifest() + " --out " +
                   report + " --self-ensemble"));
  const std::string text = slurp(report);
  EXPECT_NE(text.find("psnr "), std::string::npos);
  EXPECT_NE(text.find("ssim "), std::string::npos);
  EXPECT_NE(text.find("self_ensemble 1"), std::string::npos);
  EXPECT_NE(text.find("images 10"), std::string::npos);
}

TEST_F(CliTest, CompareTabulatesEveryRequestedVariant) {
  make_dataset();
  const std::string out = (dir_ / "cmp").string();
  ASSERT_EQ(0, run("compare --data " + manifest() + " --out " + out +
                   " --variants none,factorized " + std::string(kTinyModel) + " " +
                   kTinyTrain + " --finetune-steps 5"));
  const std::string table = slurp(fs::path(out) / "compare_report.txt");
  EXPECT_NE(table.find("\nnone "), std::string::npos);
  EXPECT_NE(table.find("\nfactorized "), std::string::npos);
  // Baseline leaves no architecture file; the searched variant does.
  EXPECT_FALSE(fs::exists(fs::path(out) / "none" / "architecture.txt"));
  EXPECT_TRUE(fs::exists(fs::path(out) / "factorized" / "architecture.txt"));
}

TEST_F(CliTest, RejectsBadInvocations) {
  make_dataset(4);
  // Unknown flag.
  EXPECT_NE(0, run("search --data " + manifest() + " --out " + (dir_ / "x").string() +
                   " --bogus 1"));
  // Missing required option.
  EXPECT_NE(0, run("eval --data " + manifest()));
  // Value outside the allowed set.
  EXPECT_NE(0, run("search --data " + manifest() + " --out " + (dir_ / "x").string() +
                   " --variant nope"));
  // Missing subcommand.
  EXPECT_NE(0, run(""));
  // Structural knob combinations the model rejects surface as clean errors.
  const auto err = dir_ / "err.txt";
  EXPECT_NE(0, run("search --data " + manifest() + " --out " + (dir_ / "x").string() +
                   " --variant filterwise --mode separate", err.string()));
  EXPECT_NE(slurp(err).find("error:"), std::string::npos);
  // A file that is not a checkpoint.
  EXPECT_NE(0, run("eval --checkpoint " + manifest() + " --data " + manifest() +
                   " --out " + (dir_ / "r.txt").string()));
}

}  // namespace
