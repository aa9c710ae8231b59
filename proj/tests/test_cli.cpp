// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "fixtures.hpp"

using namespace protoef;
using namespace protoef::fixtures;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run run_cli(const std::string& args) {
  const std::string cmd = std::string(PROTOEF_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string small_sets() {
  return "--set variant=tiny --set tiny_channels=[4,8,8] --set feature_dim=8 --set m=4 --set clip_length=16 "
         "--set height=32 --set width=32 --set epochs=2 --set batch_size=4";
}

}  // namespace

TEST(Cli, EndToEndSynthTrainEvalProjectExplain) {
  const auto dir = fresh_dir("cli_e2e");
  const auto data = dir / "data";
  auto r = run_cli("synth --out " + data.string() + " --train 8 --val 4 --test 4 --size 32 --frames 24 --seed 3");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(data / "train" / "manifest.csv"));

  const auto run = dir / "run";
  r = run_cli("train " + small_sets() + " --data " + data.string() + " --out " + run.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("(projected)"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find(fs::absolute(run / "final.ckpt").lexically_normal().string()), std::string::npos);
  std::ifstream cfg_in(run / "effective_config.json");
  const auto cfg = nlohmann::json::parse(cfg_in);
  EXPECT_EQ(cfg["m"], 4);
  EXPECT_EQ(cfg["variant"], "tiny");

  r = run_cli("eval --checkpoint " + (run / "final.ckpt").string() + " --split test --out " + (dir / "eval").string() +
              " --pca-plot " + (dir / "eval" / "pca.png").string());
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream rep_in(dir / "eval" / "eval_test.json");
  const auto rep = nlohmann::json::parse(rep_in);
  EXPECT_EQ(rep["n_samples"], 4);
  EXPECT_TRUE(fs::exists(dir / "eval" / "pca.png"));

  r = run_cli("project --checkpoint " + (run / "epoch_001.ckpt").string() + " --out " + (dir / "proj.ckpt").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(load_checkpoint(dir / "proj.ckpt").model.bank.projected);

  r = run_cli("explain --checkpoint " + (run / "final.ckpt").string() + " --clip test_00001 --out " +
              (dir / "explain").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir / "explain" / "record.json"));
}

TEST(Cli, ConfigErrorsExitWithCodeTwo) {
  const auto dir = fresh_dir("cli_errors");
  EXPECT_EQ(run_cli("train --set bogus=1 --out " + dir.string()).code, 2);
  EXPECT_EQ(run_cli("train --set m=1 --out " + dir.string()).code, 2);
  EXPECT_EQ(run_cli("train " + small_sets() + " --data " + (dir / "nowhere").string() + " --out " + dir.string()).code, 2);
  EXPECT_EQ(run_cli("eval --checkpoint " + (dir / "missing.ckpt").string()).code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  EXPECT_EQ(run_cli("--help").code, 0);
}

TEST(Cli, MissingMasksDisableOccurrenceWithWarning) {
  const auto dir = fresh_dir("cli_nomask");
  auto r = run_cli("synth --out " + (dir / "data").string() + " --train 4 --val 0 --test 0 --size 32 --frames 24 --no-masks");
  ASSERT_EQ(r.code, 0) << r.output;
  r = run_cli("train " + small_sets() + " --set epochs=1 --data " + (dir / "data").string() + " --out " +
              (dir / "run").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("warning"), std::string::npos);
  std::ifstream in(dir / "run" / "effective_config.json");
  EXPECT_EQ(nlohmann::json::parse(in)["lambda_occurrence"], 0.0);
}

TEST(Cli, NonFiniteLossExitsWithCodeThree) {
  const auto dir = fresh_dir("cli_nan");
  auto r = run_cli("synth --out " + (dir / "data").string() + " --train 4 --val 0 --test 0 --size 32 --frames 24");
  ASSERT_EQ(r.code, 0) << r.output;
  // an overflowing weight turns a finite loss part into an infinite total
  r = run_cli("train " + small_sets() + " --set lambda_mse=1e308 --data " + (dir / "data").string() + " --out " +
              (dir / "run").string());
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find("batch ids"), std::string::npos) << r.output;
}
