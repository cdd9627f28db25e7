#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "maskprune/pipeline.hpp"

namespace mp = maskprune;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / "maskprune_test_cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    mp::ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.head_dim = 4;
    c.hidden = 8;
    c.ffn = 6;
    c.seq_len = 12;
    ckpt = (dir / "dense.json").string();
    mp::save_checkpoint(ckpt, mp::Checkpoint{mp::ModelParams::init(c, 1), {}, {}, {}});
    common = " --corpus " + std::string(MASKPRUNE_CORPUS) + " --checkpoint " + ckpt +
             " --layers 2 --heads 2 --head_dim 4 --hidden 8 --ffn 6 --seq_len 12";
  }

  int run(const std::string& args) {
    const std::string cmd = std::string(MASKPRUNE_CLI) + ' ' + args + " > " +
                            (dir / "stdout.txt").string() + " 2> " + (dir / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path dir;
  std::string ckpt, common;
};

}  // namespace

TEST_F(CliTest, ConfigErrorsExitWithTwo) {
  EXPECT_EQ(run("prune --eta1 abc"), 2);
  EXPECT_EQ(run("prune --no_such_key 1"), 2);
  EXPECT_EQ(run("prune -c " + (dir / "missing.json").string()), 2);
  EXPECT_EQ(run("prune --target_sparsity 1.5"), 2);
  EXPECT_EQ(run("stats" + common), 2);  // dense checkpoint has no masks
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(CliTest, ShortPruneRunMissesTargetAndExitsWithThree) {
  const fs::path out = dir / "run";
  std::ofstream(dir / "cfg.json") << R"({"iterations": 2, "batch_size": 1, "eval_windows": 2})";
  const int code = run("prune -c " + (dir / "cfg.json").string() + common +
                       " --iterations 3 --verify_batches 2 --out_dir " + out.string());
  EXPECT_EQ(code, 3);
  for (const char* f : {"trace.csv", "summary.json", "mask_stats.csv", "plan.json", "pruned.ckpt.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  // The flag overrides the file value.
  EXPECT_EQ(mp::read_json((out / "summary.json").string())["iterations"], 3);

  EXPECT_EQ(run("stats" + common + " --checkpoint " + (out / "masked.ckpt.json").string() +
                " --out_dir " + (dir / "stats").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "stats" / "mask_hist.csv"));
  EXPECT_EQ(run("eval" + common + " --checkpoint " + (out / "pruned.ckpt.json").string() +
                " --eval_windows 2"),
            0);
}

TEST_F(CliTest, DivergedPretrainingExitsWithFour) {
  EXPECT_EQ(run("pretrain" + common + " --checkpoint " + (dir / "p.json").string() +
                " --pretrain_lr 1e300 --pretrain_steps 3 --pretrain_batch_size 1"),
            4);
}
