// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "lmlite/config.hpp"

using namespace lmlite;

TEST(Config, DefaultsRoundTrip) {
  const config::RunConfig c;
  EXPECT_TRUE(config::check(c).empty());
  const std::string text = config::serialize(c);
  EXPECT_EQ(config::serialize(config::parse(text)), text);
}

TEST(Config, EditedValuesRoundTrip) {
  config::RunConfig c;
  c.seed = 42;
  c.optim.base_lr = 3.0000000000000004e-4;
  c.masking.observation_probs = {0.25, 0.25, 0.25, 0.25};
  c.loss.negative_scope = obj::NegativeScope::Global;
  c.model.decoder.query_self_attention = false;
  c.eval.pooling = "max";
  c.ablation.use_maps = false;
  const auto back = config::parse(config::serialize(c));
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.optim.base_lr, c.optim.base_lr);
  EXPECT_EQ(back.masking.observation_probs, c.masking.observation_probs);
  EXPECT_EQ(back.loss.negative_scope, obj::NegativeScope::Global);
  EXPECT_FALSE(back.model.decoder.query_self_attention);
  EXPECT_EQ(back.eval.pooling, "max");
  EXPECT_FALSE(back.ablation.use_maps);
  EXPECT_EQ(config::serialize(back), config::serialize(c));
}

TEST(Config, ParseOverlaysDefaults) {
  const auto c = config::parse("seed = 9\n\n# comment\n[optim]\ntotal_steps = 10\nwarmup_steps = 1\n");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.optim.total_steps, 10u);
  EXPECT_EQ(c.optim.batch_size, config::RunConfig::desk_optim().batch_size);
}

TEST(Config, UnknownKeysAndBadValuesFail) {
  EXPECT_THROW(config::parse("[optim]\nlearning_rate = 1\n"), config::ConfigError);
  EXPECT_THROW(config::parse("[nosuch]\nx = 1\n"), config::ConfigError);
  EXPECT_THROW(config::parse("[optim]\ntotal_steps = ten\n"), config::ConfigError);
  EXPECT_THROW(config::parse("[masking]\nmode = sideways\n"), config::ConfigError);
  try {
    config::parse("seed = 1\n[optim]\nbogus = 2\n");
    FAIL();
  } catch (const config::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos) << e.what();
  }
}

TEST(Config, Overrides) {
  config::RunConfig c;
  config::apply_override(c, "optim.total_steps=10");
  config::apply_override(c, "seed=5");
  config::apply_override(c, "masking.map_probs=0.4,0,0.6,0");
  EXPECT_EQ(c.optim.total_steps, 10u);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.masking.map_probs, (std::array<double, 4>{0.4, 0.0, 0.6, 0.0}));
  EXPECT_THROW(config::apply_override(c, "optim.nope=1"), config::ConfigError);
  EXPECT_THROW(config::apply_override(c, "no_equals_sign"), config::ConfigError);
}

TEST(Config, KnownKeysCoverSerialization) {
  const auto keys = config::known_keys();
  EXPECT_EQ(std::set<std::string>(keys.begin(), keys.end()).size(), keys.size());
  const std::string text = config::serialize(config::RunConfig{});
  for (const auto& k : keys) {
    const std::string leaf = k.substr(k.find('.') + 1);
    EXPECT_NE(text.find(leaf + " = "), std::string::npos) << k;
  }
}

TEST(Config, CheckCollectsProblems) {
  config::RunConfig c;
  c.optim.micro_batch_size = 3;
  c.model.encoder.heads = 5;
  c.eval.pooling = "median";
  EXPECT_GE(config::check(c).size(), 3u);
}

TEST(Config, PretrainConfigAlignsModules) {
  config::RunConfig c;
  c.model.encoder.dim = 32;
  c.ablation.name = "x";
  c.ablation.target = "pixel";
  const auto pc = config::pretrain_config(c);
  EXPECT_EQ(pc.tokenizer.model_dim, 32);
  EXPECT_EQ(pc.target_mode, model::TargetMode::Pixel);
  EXPECT_TRUE(train::check(pc).empty());
  config::set_ablation(c, train::ablation_matrix("table4").front());
  EXPECT_EQ(c.ablation.target, "ema");
  EXPECT_FALSE(c.ablation.use_maps);
  EXPECT_EQ(config::pretrain_config(c).masking.mode, mask::MaskingMode::UniformRandom);
}

TEST(Tasks, SplitsAreDisjointAndDeterministic) {
  config::RunConfig c;
  c.eval.task_count = 50;
  c.data.height = c.data.width = 16;
  const auto a = config::make_task(c, "cls5");
  EXPECT_EQ(a.num_classes, 5);
  EXPECT_EQ(a.train.size() + a.val.size() + a.test.size(), 50u);
  EXPECT_EQ(a.train.size(), 30u);
  EXPECT_NO_THROW(eval::check_splits(a));
  const auto b = config::make_task(c, "cls5");
  EXPECT_EQ(a.test, b.test);
  // task data never coincides with the pretraining corpus
  const auto pre = data::synth_generate(c.seed, 1, config::generator(c));
  for (const auto& s : a.train) EXPECT_NE(s.location_id, pre[0].location_id);
  EXPECT_TRUE(config::make_task(c, "seg5").segmentation);
  EXPECT_EQ(config::task_spec("cls3").num_classes, 3);
  EXPECT_THROW(config::make_task(c, "nope"), std::invalid_argument);
}
