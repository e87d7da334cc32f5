// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"

using namespace lmlite;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream is(p);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

config::RunConfig tiny_config() {
  config::RunConfig c;
  c.data.count = 16;
  c.data.height = c.data.width = 16;
  c.data.min_timesteps = 2;
  c.data.max_timesteps = 3;
  c.tokenizer.max_crop = 2;
  c.tokenizer.min_timesteps = 1;
  c.tokenizer.max_timesteps = 2;
  c.model.encoder.dim = 16;
  c.model.encoder.heads = 2;
  c.model.decoder.depth = 1;
  c.optim.batch_size = 4;
  c.optim.micro_batch_size = 2;
  c.optim.total_steps = 10;
  c.optim.warmup_steps = 2;
  c.checkpoint_every = 5;
  c.probe_samples = 2;
  c.eval.task_count = 40;
  c.eval.probe_epochs = 5;
  c.eval.finetune_epochs = 2;
  c.eval.max_timesteps = 2;
  c.eval.finetune_max_timesteps = 2;
  return c;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() / ("lmlite_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root);
    fs::create_directories(root);
    cfg = (root / "run.ini").string();
    std::ofstream(cfg) << config::serialize(tiny_config());
  }
  void TearDown() override { fs::remove_all(root); }

  int run(std::vector<std::string> args) {
    out.str("");
    err.str("");
    return cli::run(args, out, err);
  }
  // synth + 10-step pretrain; returns the final checkpoint
  fs::path pretrained() {
    EXPECT_EQ(run({"synth", "--config", cfg, "--out", (root / "data").string()}), 0) << err.str();
    EXPECT_EQ(run({"pretrain", "--config", cfg, "--data", (root / "data").string(), "--out", (root / "pre").string()}), 0)
        << err.str();
    return root / "pre" / "ckpt_000010.lmlc";
  }

  fs::path root;
  std::string cfg;
  std::ostringstream out, err;
};

}  // namespace

TEST_F(CliTest, SynthZeroCountWritesManifestOnly) {
  ASSERT_EQ(run({"synth", "--config", cfg, "--count", "0", "--out", (root / "d").string()}), 0) << err.str();
  for (const auto& e : fs::directory_iterator(root / "d")) EXPECT_FALSE(e.path().filename().string().starts_with("sample_"));
  EXPECT_TRUE(fs::exists(root / "d" / "manifest.json"));
  EXPECT_EQ(json::parse(slurp(root / "d" / "manifest.json")).at("count").get<int>(), 0);
}

TEST_F(CliTest, SynthIsDeterministicAndRefusesToClobber) {
  ASSERT_EQ(run({"synth", "--config", cfg, "--seed", "3", "--out", (root / "a").string()}), 0) << err.str();
  ASSERT_EQ(run({"synth", "--config", cfg, "--seed", "3", "--out", (root / "b").string()}), 0) << err.str();
  EXPECT_EQ(slurp(root / "a" / "manifest.json"), slurp(root / "b" / "manifest.json"));
  EXPECT_EQ(run({"synth", "--config", cfg, "--seed", "3", "--out", (root / "a").string()}), 2);
  std::ofstream(root / "a" / "keep.txt") << "user file";
  EXPECT_EQ(run({"synth", "--config", cfg, "--seed", "4", "--out", (root / "a").string(), "--force"}), 0) << err.str();
  EXPECT_TRUE(fs::exists(root / "a" / "keep.txt"));
  EXPECT_NE(slurp(root / "a" / "manifest.json"), slurp(root / "b" / "manifest.json"));
}

TEST_F(CliTest, PretrainDryRun) {
  ASSERT_EQ(run({"synth", "--config", cfg, "--out", (root / "data").string()}), 0);
  ASSERT_EQ(run({"pretrain", "--config", cfg, "--data", (root / "data").string(), "--out", (root / "p").string(),
                 "--dry-run"}),
            0)
      << err.str();
  EXPECT_NE(out.str().find("[optim]"), std::string::npos);
  EXPECT_NE(out.str().find("# learned parameters: "), std::string::npos);
  EXPECT_FALSE(fs::exists(root / "p" / "metrics.jsonl"));
}

TEST_F(CliTest, PretrainWritesOneMetricsRecordPerStep) {
  pretrained();
  const auto recs = lines(root / "pre" / "metrics.jsonl");
  ASSERT_EQ(recs.size(), 10u);
  const json first = json::parse(recs.front());
  for (const char* k : {"step", "lr", "loss_total", "loss_patch_v0", "loss_patch_v1", "loss_inst", "target_variance",
                        "grad_norm"}) {
    EXPECT_TRUE(first.contains(k)) << k;
  }
}

TEST_F(CliTest, ResumeReproducesMetricStream) {
  pretrained();
  ASSERT_EQ(run({"pretrain", "--config", cfg, "--data", (root / "data").string(), "--out", (root / "resumed").string(),
                 "--checkpoint", (root / "pre" / "ckpt_000005.lmlc").string()}),
            0)
      << err.str();
  const auto full = lines(root / "pre" / "metrics.jsonl");
  const auto tail = lines(root / "resumed" / "metrics.jsonl");
  ASSERT_EQ(tail.size(), 5u);
  EXPECT_EQ(tail, std::vector<std::string>(full.begin() + 5, full.end()));
  EXPECT_EQ(slurp(root / "resumed" / "ckpt_000010.lmlc"), slurp(root / "pre" / "ckpt_000010.lmlc"));
}

TEST_F(CliTest, KnnReportProvenanceAndDeterminism) {
  const auto ck = pretrained();
  ASSERT_EQ(run({"eval", "--checkpoint", ck.string(), "--config", cfg, "--task", "cls3", "--mode", "knn", "--out",
                 (root / "e1").string()}),
            0)
      << err.str();
  ASSERT_EQ(run({"eval", "--checkpoint", ck.string(), "--config", cfg, "--task", "cls3", "--mode", "knn", "--out",
                 (root / "e2").string()}),
            0);
  const std::string r1 = slurp(root / "e1" / "report.json");
  EXPECT_EQ(r1, slurp(root / "e2" / "report.json"));
  EXPECT_EQ(slurp(root / "e1" / "report.txt"), slurp(root / "e2" / "report.txt"));
  const json j = json::parse(r1);
  EXPECT_EQ(j.at("provenance").at("k"), "20");
  EXPECT_EQ(j.at("provenance").at("similarity"), "cosine");
  EXPECT_EQ(j.at("task"), "cls3");
}

TEST_F(CliTest, LinearProbeGridHasEightRates) {
  const auto ck = pretrained();
  ASSERT_EQ(run({"eval", "--checkpoint", ck.string(), "--config", cfg, "--task", "cls5", "--mode", "lp", "--out",
                 (root / "lp").string()}),
            0)
      << err.str();
  const json j = json::parse(slurp(root / "lp" / "report.json"));
  std::set<std::string> lrs;
  for (const auto& p : j.at("sweep")) lrs.insert(p.at("params").at("lr").get<std::string>());
  EXPECT_EQ(lrs.size(), 8u);
}

TEST_F(CliTest, FrozenModesRefuseSegmentation) {
  const auto ck = pretrained();
  EXPECT_EQ(run({"eval", "--checkpoint", ck.string(), "--config", cfg, "--task", "seg5", "--mode", "knn", "--out",
                 (root / "seg").string()}),
            2);
}

TEST_F(CliTest, FinetuneRecordsEpochs) {
  const auto ck = pretrained();
  ASSERT_EQ(run({"eval", "--checkpoint", ck.string(), "--config", cfg, "--task", "cls5", "--mode", "finetune", "--out",
                 (root / "ft").string()}),
            0)
      << err.str();
  const json j = json::parse(slurp(root / "ft" / "report.json"));
  EXPECT_EQ(j.at("epochs").size(), 2u);
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run({"bogus"}), 2);
  EXPECT_EQ(run({"pretrain", "--config", cfg}), 2);  // --data missing
  EXPECT_EQ(run({"synth", "--config", cfg, "--set", "optim.nope=1", "--out", (root / "x").string()}), 2);
  EXPECT_EQ(run({"ablate", "--config", cfg, "--matrix", "table9", "--out", (root / "y").string()}), 2);
}

TEST_F(CliTest, AblateTable4) {
  ASSERT_EQ(run({"ablate", "--config", cfg, "--matrix", "table4", "--out", (root / "ab").string()}), 0)
      << out.str() << err.str();
  EXPECT_NE(out.str().find("6 arms"), std::string::npos) << out.str();
  const json j = json::parse(slurp(root / "ab" / "ablation.json"));
  ASSERT_EQ(j.at("arms").size(), 6u);
  for (const auto& a : j.at("arms")) {
    EXPECT_EQ(a.at("status"), "complete") << a.dump();
    EXPECT_TRUE(a.contains("test_metric"));
    EXPECT_TRUE(a.contains("collapse_detected"));
    const json s = json::parse(slurp(root / "ab" / a.at("name").get<std::string>() / "summary.json"));
    EXPECT_EQ(s.at("target_variance_trace").size(), 10u);
  }
  EXPECT_TRUE(j.contains("lite_beats_full_latent_mim"));
  EXPECT_TRUE(fs::exists(root / "ab" / "ranks.csv"));
  // a second invocation reuses every completed arm
  ASSERT_EQ(run({"ablate", "--config", cfg, "--matrix", "table4", "--out", (root / "ab").string()}), 0);
  EXPECT_NE(out.str().find("reusing"), std::string::npos);
}

TEST_F(CliTest, FinalArmMatchesDefaultConfig) {
  const config::RunConfig base = tiny_config();
  const auto arms = train::ablation_matrix("table5");
  config::RunConfig c = base;
  config::set_ablation(c, arms.back());
  EXPECT_EQ(arms.back().name, "final");
  EXPECT_EQ(config::serialize(c), config::serialize(base));
}
