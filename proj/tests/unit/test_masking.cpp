// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "lmlite/masking.hpp"
#include "lmlite/rng.hpp"

using namespace lmlite;
using mask::Category;
using mask::MaskConfig;

namespace {

data::Registry obs_map_registry(int obs_bandsets = 1) {
  data::ModalitySpec obs{"obs", data::ModalityKind::Observation, data::Temporality::TimeSeries, {}};
  for (int b = 0; b < obs_bandsets; ++b) obs.bandsets.push_back({"obs_" + std::to_string(b), "obs", 1});
  data::ModalitySpec map{"map", data::ModalityKind::Map, data::Temporality::Static, {{"map_a", "map", 1}}, 3};
  return data::Registry({obs, map});
}

data::BandsetRaster raster(const std::string& id, int T, int side, double value) {
  data::BandsetRaster r;
  r.bandset_id = id;
  r.timesteps = T;
  r.height = r.width = side;
  r.bands = 1;
  r.values.assign(static_cast<std::size_t>(T * side * side), value);
  r.present.assign(T, 1);
  return r;
}

// side x side patches per bandset at patch size 1
tok::TokenBatch make_batch(const data::Registry& reg, int samples, int side) {
  std::vector<data::Sample> ss;
  for (int s = 0; s < samples; ++s) {
    data::Sample x;
    x.timestamps = {0};
    for (const auto& b : reg.bandsets()) x.rasters.push_back(raster(b.spec.id, 1, side, b.kind == data::ModalityKind::Map ? 1.0 : 0.5));
    ss.push_back(x);
  }
  std::vector<tok::SampleDraw> draws;
  for (const auto& x : ss) draws.push_back(tok::full_layout(x, 1));
  tok::TokenizerConfig cfg;
  cfg.min_patch_size = 1;
  return tok::assemble_tokens(ss, draws, reg, cfg, true);
}

bool encodes(Category c) { return c == Category::EncodeOnly || c == Category::EncodeAndDecode; }
bool decodes(Category c) { return c == Category::DecodeOnly || c == Category::EncodeAndDecode; }

// Independent categorical draw followed by rejection on the acceptance rule;
// valid when every bandset has at least two tokens.
std::array<std::array<double, 4>, 2> rejection_oracle(const data::Registry& reg, const MaskConfig& c, int draws,
                                                      std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::array<std::array<double, 4>, 2> freq{};
  std::array<double, 2> total{};
  std::vector<Category> cats(reg.num_bandsets());
  for (int n = 0; n < draws;) {
    int enc = 0, dec = 0;
    for (std::size_t b = 0; b < cats.size(); ++b) {
      const bool is_map = reg.bandset(b).kind == data::ModalityKind::Map;
      const auto& p = is_map ? c.map_probs : c.observation_probs;
      std::discrete_distribution<int> d(p.begin(), p.end());
      cats[b] = static_cast<Category>(d(gen));
      enc += encodes(cats[b]);
      dec += decodes(cats[b]);
    }
    if (enc < c.min_encoded || dec < c.min_decoded) continue;
    ++n;
    for (std::size_t b = 0; b < cats.size(); ++b) {
      const int k = reg.bandset(b).kind == data::ModalityKind::Map;
      freq[k][static_cast<int>(cats[b])] += 1;
      total[k] += 1;
    }
  }
  for (int k = 0; k < 2; ++k)
    for (auto& f : freq[k]) f /= total[k] > 0 ? total[k] : 1;
  return freq;
}

}  // namespace

TEST(MaskConfigValidate, RejectsBadSettings) {
  MaskConfig c;
  EXPECT_NO_THROW(mask::validate(c));
  c.mask_ratio = 1.0;
  EXPECT_THROW(mask::validate(c), std::invalid_argument);
  c = MaskConfig{};
  c.observation_probs = {0.5, 0.5, 0.5, 0.0};
  EXPECT_THROW(mask::validate(c), std::invalid_argument);
  c = MaskConfig{};
  c.map_probs = {0.5, 0.0, 0.0, 0.5};
  EXPECT_THROW(mask::validate(c), std::invalid_argument);
}

TEST(MaskPlan, ObservationAlwaysEncodesWithSingleObsAndMap) {
  const auto reg = obs_map_registry();
  const auto batch = make_batch(reg, 4, 3);
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto plan = mask::sample_mask_plan(batch, reg, MaskConfig{}, seed);
    for (const auto& cats : plan.categories) EXPECT_TRUE(encodes(cats[0])) << seed;
  }
}

TEST(MaskPlan, MapsNeverEncode) {
  const auto reg = obs_map_registry(2);
  const auto batch = make_batch(reg, 1, 2);
  const std::size_t map_b = reg.bandset_index("map_a");
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto plan = mask::sample_mask_plan(batch, reg, MaskConfig{}, seed);
    ASSERT_FALSE(encodes(plan.categories[0][map_b]));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (batch.metas[i].bandset == map_b) ASSERT_FALSE(plan.visible[i]);
    }
  }
}

TEST(MaskPlan, SameSeedSamePlan) {
  const auto reg = obs_map_registry(3);
  const auto batch = make_batch(reg, 3, 4);
  EXPECT_EQ(mask::sample_mask_plan(batch, reg, MaskConfig{}, 42, 1), mask::sample_mask_plan(batch, reg, MaskConfig{}, 42, 1));
  EXPECT_NE(mask::sample_mask_plan(batch, reg, MaskConfig{}, 42), mask::sample_mask_plan(batch, reg, MaskConfig{}, 43));
}

TEST(MaskPlan, EncodeAndDecodeSplitsHalf) {
  const data::Registry reg({{"obs", data::ModalityKind::Observation, data::Temporality::TimeSeries, {{"a", "obs", 1}}}});
  data::Sample x;
  x.timestamps = {0, 1};
  x.rasters.push_back(raster("a", 2, 2, 0.1));  // 2 timesteps x 4 cells = 8 tokens
  const auto d = tok::full_layout(x, 1);
  tok::TokenizerConfig cfg;
  cfg.min_patch_size = 1;
  const auto batch = tok::assemble_tokens(std::span(&x, 1), std::span(&d, 1), reg, cfg, true);
  ASSERT_EQ(batch.size(), 8u);
  MaskConfig c;
  c.observation_probs = {0, 0, 0, 1};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto plan = mask::sample_mask_plan(batch, reg, c, seed);
    const auto mb = mask::apply_mask(batch, plan);
    EXPECT_EQ(mb.encoder_rows.size(), 4u);
    EXPECT_EQ(mb.target_rows.size(), 4u);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NE(plan.visible[i], plan.target[i]);
  }
}

TEST(MaskPlan, CategoryFrequenciesMatchRejectionOracle) {
  const auto reg = obs_map_registry(2);
  const auto batch = make_batch(reg, 1, 2);
  std::vector<mask::MaskPlan> plans;
  for (std::uint64_t seed = 0; seed < 20000; ++seed) plans.push_back(mask::sample_mask_plan(batch, reg, MaskConfig{}, seed));
  const auto st = mask::plan_statistics(plans, reg);
  const auto oracle = rejection_oracle(reg, MaskConfig{}, 200000, 9);
  for (int c = 0; c < 4; ++c) {
    EXPECT_NEAR(st.frequency(data::ModalityKind::Observation, static_cast<Category>(c)), oracle[0][c], 0.02) << c;
    EXPECT_NEAR(st.frequency(data::ModalityKind::Map, static_cast<Category>(c)), oracle[1][c], 0.02) << c;
  }
}

TEST(MaskPlan, TwoViewsUsuallyDiffer) {
  const auto reg = obs_map_registry(2);
  const auto batch = make_batch(reg, 2, 3);
  int differ = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const std::uint64_t seed = derive_seed(s, "pair");
    const auto a = mask::sample_mask_plan(batch, reg, MaskConfig{}, derive_seed(seed, "view", {0}), 0);
    const auto b = mask::sample_mask_plan(batch, reg, MaskConfig{}, derive_seed(seed, "view", {1}), 1);
    differ += a.visible != b.visible || a.target != b.target;
  }
  EXPECT_GE(differ, 95);
}

TEST(MaskPlan, RandomRegistriesHaveNoViolations) {
  std::mt19937_64 gen(3);
  for (int config = 0; config < 10; ++config) {
    const int nobs = 1 + static_cast<int>(gen() % 3);
    const auto reg = obs_map_registry(nobs);
    const auto batch = make_batch(reg, 3, 2 + static_cast<int>(gen() % 3));
    MaskConfig c;
    c.mask_ratio = 0.2 + 0.6 * std::uniform_real_distribution<double>()(gen);
    c.mode = config % 4 == 3 ? mask::MaskingMode::UniformRandom : mask::MaskingMode::ModalityAware;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const auto plan = mask::sample_mask_plan(batch, reg, c, seed);
      const auto v = mask::check_plan(batch, plan, reg, c);
      ASSERT_TRUE(v.empty()) << v.front();
    }
  }
}

TEST(MaskPlan, UnsatisfiableConfigExhaustsRetries) {
  const auto reg = obs_map_registry(1);
  const auto batch = make_batch(reg, 1, 2);
  MaskConfig c;
  c.min_encoded = 2;  // only one bandset can ever encode
  EXPECT_THROW(mask::sample_mask_plan(batch, reg, c, 1), mask::MaskingError);
}

TEST(MaskPlan, ApplyMaskRejectsForeignPlan) {
  const auto reg = obs_map_registry(1);
  const auto plan = mask::sample_mask_plan(make_batch(reg, 1, 2), reg, MaskConfig{}, 1);
  EXPECT_THROW(mask::apply_mask(make_batch(reg, 1, 3), plan), std::invalid_argument);
}
