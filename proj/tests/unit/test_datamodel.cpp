// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "lmlite/datamodel.hpp"

using namespace lmlite;
using data::BandsetRaster;
using data::Sample;

namespace {

// Pearson correlation over pixels of timesteps present in both rasters.
double pearson(const BandsetRaster& a, int ba, const BandsetRaster& b, int bb) {
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  std::size_t n = 0;
  for (int t = 0; t < a.timesteps; ++t) {
    if (!a.present[t] || !b.present[t]) continue;
    for (int y = 0; y < a.height; ++y) {
      for (int x = 0; x < a.width; ++x) {
        const double u = a.at(t, y, x, ba);
        const double v = b.at(t, y, x, bb);
        sx += u, sy += v, sxx += u * u, syy += v * v, sxy += u * v;
        ++n;
      }
    }
  }
  if (n < 2) return std::nan("");
  const double cov = sxy / n - (sx / n) * (sy / n);
  const double vx = sxx / n - (sx / n) * (sx / n);
  const double vy = syy / n - (sy / n) * (sy / n);
  return cov / std::sqrt(vx * vy);
}

Sample constant_sample(double value) {
  Sample s;
  s.timestamps = {0, 1, 2};
  BandsetRaster r;
  r.bandset_id = "s1_vv_vh";
  r.timesteps = 3;
  r.height = r.width = 8;
  r.bands = 2;
  r.values.assign(3 * 8 * 8 * 2, value);
  r.present = {1, 1, 1};
  s.rasters.push_back(r);
  return s;
}

}  // namespace

TEST(Registry, DefaultShape) {
  const auto reg = data::Registry::default_registry();
  std::map<std::string, std::size_t> per_modality;
  for (const auto& m : reg.modalities()) per_modality[m.id] = m.bandsets.size();
  EXPECT_EQ(reg.modalities().size(), 4u);
  ASSERT_TRUE(reg.has_maps());
  int obs = 0;
  for (const auto& m : reg.modalities()) {
    if (m.kind == data::ModalityKind::Map) {
      EXPECT_EQ(m.bandsets.size(), 1u);
      EXPECT_EQ(m.bandsets[0].band_count, 1);
    } else {
      ++obs;
    }
  }
  EXPECT_EQ(obs, 3);
  EXPECT_EQ(reg.bandset(reg.bandset_index("s1_vv_vh")).spec.band_count, 2);
  EXPECT_EQ(per_modality.at(reg.bandset(reg.bandset_index("s2_10m")).spec.modality_id), 3u);
  EXPECT_EQ(per_modality.at(reg.bandset(reg.bandset_index("l8_ms")).spec.modality_id), 2u);
  EXPECT_FALSE(reg.without_maps().has_maps());
}

TEST(Registry, RejectsDuplicateBandsets) {
  data::ModalitySpec m{"a", data::ModalityKind::Observation, data::Temporality::TimeSeries, {{"x", "a", 1}, {"x", "a", 2}}};
  EXPECT_THROW(data::Registry({m}), std::invalid_argument);
}

TEST(Synth, Deterministic) {
  const data::GeneratorConfig cfg;
  EXPECT_EQ(data::synth_generate(3, 4, cfg), data::synth_generate(3, 4, cfg));
  EXPECT_NE(data::synth_generate(3, 1, cfg), data::synth_generate(4, 1, cfg));
  // any subset regenerates independently
  EXPECT_EQ(data::synth_generate(3, 4, cfg)[2], data::synth_sample(3, 2, cfg));
}

TEST(Synth, ZeroModalitiesFails) {
  data::GeneratorConfig cfg;
  cfg.registry = data::Registry();
  EXPECT_THROW(data::synth_generate(0, 1, cfg), std::invalid_argument);
}

TEST(Synth, SamplesValidateAndMapsHoldClassIds) {
  const data::GeneratorConfig cfg;
  for (const auto& s : data::synth_generate(9, 20, cfg)) {
    EXPECT_TRUE(data::validate_sample(s, cfg.registry).empty());
    const auto* map = s.find("worldcover");
    ASSERT_NE(map, nullptr);
    std::vector<int> counts(5, 0);
    for (double v : map->values) {
      ASSERT_EQ(v, std::floor(v));
      ASSERT_GE(v, 0);
      ASSERT_LT(v, 5);
      ++counts[static_cast<int>(v)];
    }
    ASSERT_TRUE(s.label.has_value());
    EXPECT_EQ(*s.label, std::max_element(counts.begin(), counts.end()) - counts.begin());
  }
}

TEST(Synth, NoiseFreeSingleChannelBandsArePerfectlyCorrelated) {
  data::GeneratorConfig cfg;
  cfg.noise_scale = 0.0;
  cfg.nuisance_scale = 0.0;
  cfg.latent_channels = 1;
  cfg.presence_prob = 1.0;
  cfg.modality_drop_prob = 0.0;
  const auto s = data::synth_sample(5, 0, cfg);
  std::vector<std::pair<const BandsetRaster*, int>> bands;
  for (const auto& r : s.rasters) {
    if (r.bandset_id == "worldcover") continue;
    for (int b = 0; b < r.bands; ++b) bands.emplace_back(&r, b);
  }
  for (std::size_t i = 0; i < bands.size(); ++i) {
    for (std::size_t j = i + 1; j < bands.size(); ++j) {
      if (bands[i].first->timesteps != bands[j].first->timesteps) continue;
      const double r = pearson(*bands[i].first, bands[i].second, *bands[j].first, bands[j].second);
      EXPECT_NEAR(std::abs(r), 1.0, 1e-9);
    }
  }
}

TEST(Synth, CrossModalCorrelationAtDefaults) {
  const data::GeneratorConfig cfg;
  const auto samples = data::synth_generate(0, 512, cfg);
  double total = 0.0;
  std::size_t pairs = 0;
  for (const auto& s : samples) {
    const auto* s1 = s.find("s1_vv_vh");
    for (const char* id : {"s2_10m", "s2_20m", "s2_60m"}) {
      const auto* s2 = s.find(id);
      for (int a = 0; a < s1->bands; ++a) {
        for (int b = 0; b < s2->bands; ++b) {
          const double r = pearson(*s1, a, *s2, b);
          if (std::isnan(r)) continue;
          total += std::abs(r);
          ++pairs;
        }
      }
    }
  }
  ASSERT_GT(pairs, 0u);
  EXPECT_GE(total / pairs, 0.3);
}

TEST(Stats, TwoValues) {
  Sample s = constant_sample(0.0);
  auto& r = s.rasters[0];
  for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] = (i / 2) % 2 ? 2.0 : 0.0;
  data::Registry reg({{"s1", data::ModalityKind::Observation, data::Temporality::TimeSeries, {{"s1_vv_vh", "s1", 2}}}});
  const auto st = data::compute_stats(std::span(&s, 1), reg, data::StatsProvenance::EvalSet);
  for (const auto& b : st.bands.at("s1_vv_vh")) {
    EXPECT_DOUBLE_EQ(b.mean, 1.0);
    EXPECT_DOUBLE_EQ(b.std, 1.0);
    EXPECT_FALSE(b.clamped);
  }
  EXPECT_EQ(st.provenance, data::StatsProvenance::EvalSet);
}

TEST(Stats, ConstantBandIsClamped) {
  const Sample s = constant_sample(3.5);
  data::Registry reg({{"s1", data::ModalityKind::Observation, data::Temporality::TimeSeries, {{"s1_vv_vh", "s1", 2}}}});
  const auto st = data::compute_stats(std::span(&s, 1), reg, data::StatsProvenance::Pretraining);
  EXPECT_DOUBLE_EQ(st.bands.at("s1_vv_vh")[0].mean, 3.5);
  EXPECT_DOUBLE_EQ(st.bands.at("s1_vv_vh")[0].std, data::NormStats::kMinStd);
  EXPECT_TRUE(st.bands.at("s1_vv_vh")[0].clamped);
}

TEST(Stats, LawOfLargeNumbers) {
  Sample s = constant_sample(0.0);
  auto& r = s.rasters[0];
  r.timesteps = 1;
  r.present = {1};
  r.height = 100;
  r.width = 100;
  r.bands = 1;
  r.values.resize(10000);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n01;
  for (double& v : r.values) v = n01(rng);
  data::Registry reg({{"s1", data::ModalityKind::Observation, data::Temporality::TimeSeries, {{"s1_vv_vh", "s1", 1}}}});
  const auto st = data::compute_stats(std::span(&s, 1), reg, data::StatsProvenance::Pretraining);
  EXPECT_NEAR(st.bands.at("s1_vv_vh")[0].mean, 0.0, 0.05);
  EXPECT_NEAR(st.bands.at("s1_vv_vh")[0].std, 1.0, 0.05);
}

TEST(Normalize, IdentityStatsLeaveSampleUnchanged) {
  const data::GeneratorConfig cfg;
  const Sample s = data::synth_sample(1, 0, cfg);
  data::NormStats st;
  for (const auto& b : cfg.registry.bandsets()) st.bands[b.spec.id].assign(b.spec.band_count, {0.0, 1.0, false});
  EXPECT_EQ(data::normalize(s, st, cfg.registry), s);
}

TEST(Normalize, ConstantRasterGoesToZero) {
  const Sample s = constant_sample(2.25);
  data::Registry reg({{"s1", data::ModalityKind::Observation, data::Temporality::TimeSeries, {{"s1_vv_vh", "s1", 2}}}});
  data::NormStats st;
  st.bands["s1_vv_vh"] = {{2.25, 1.0, false}, {2.25, 1.0, false}};
  const Sample n = data::normalize(s, st, reg);
  for (double v : n.rasters[0].values) EXPECT_EQ(v, 0.0);
}

TEST(Normalize, RecomputedStatsAreStandard) {
  const data::GeneratorConfig cfg;
  const auto samples = data::synth_generate(2, 16, cfg);
  const auto st = data::compute_stats(samples, cfg.registry, data::StatsProvenance::Pretraining);
  const auto norm = data::normalize(samples, st, cfg.registry);
  const auto again = data::compute_stats(norm, cfg.registry, data::StatsProvenance::EvalSet);
  for (const auto& [id, bands] : again.bands) {
    for (const auto& b : bands) {
      EXPECT_NEAR(b.mean, 0.0, 1e-9) << id;
      EXPECT_NEAR(b.std, 1.0, 1e-9) << id;
    }
  }
  // maps are never normalized
  EXPECT_EQ(norm[0].find("worldcover")->values, samples[0].find("worldcover")->values);
}

TEST(Normalize, MissingStatsFail) {
  const data::GeneratorConfig cfg;
  EXPECT_THROW(data::normalize(data::synth_sample(1, 0, cfg), data::NormStats{}, cfg.registry), std::invalid_argument);
}

TEST(Validate, TooFewTimesteps) {
  const data::GeneratorConfig cfg;
  Sample s = data::synth_sample(1, 0, cfg);
  s.timestamps.resize(2);
  for (auto& r : s.rasters) {
    if (r.timesteps == 1) continue;
    r.timesteps = 2;
    r.present.resize(2);
    r.values.resize(static_cast<std::size_t>(2) * r.height * r.width * r.bands);
  }
  const auto v = data::validate_sample(s, cfg.registry);
  ASSERT_FALSE(v.empty());
  EXPECT_TRUE(std::any_of(v.begin(), v.end(), [](const auto& m) { return m.find("timesteps out of range") != m.npos; }));
}

TEST(Validate, MisalignedHeight) {
  const data::GeneratorConfig cfg;
  Sample s = data::synth_sample(1, 0, cfg);
  auto& r = s.rasters[1];
  r.height = 16;
  r.values.resize(static_cast<std::size_t>(r.timesteps) * 16 * r.width * r.bands);
  const auto v = data::validate_sample(s, cfg.registry);
  EXPECT_TRUE(std::any_of(v.begin(), v.end(), [](const auto& m) { return m.find("alignment") != m.npos; }));
}

TEST(DatasetIo, RoundTrip) {
  const data::GeneratorConfig cfg;
  const auto samples = data::synth_generate(4, 3, cfg);
  const auto dir = std::filesystem::temp_directory_path() / "lmlite_test_dataset_io";
  std::filesystem::remove_all(dir);
  const auto written = data::write_dataset(dir, samples, 4, cfg);
  data::DatasetManifest m;
  const auto back = data::read_dataset(dir, &m);
  EXPECT_EQ(back, samples);
  EXPECT_EQ(m.schema_version, data::kDatasetSchemaVersion);
  EXPECT_EQ(m.generator_hash, data::config_hash(cfg));
  EXPECT_EQ(m.content_hash, written.content_hash);
  std::filesystem::remove_all(dir);
}

TEST(DatasetIo, EmptyDatasetHasManifestOnly) {
  const data::GeneratorConfig cfg;
  const auto dir = std::filesystem::temp_directory_path() / "lmlite_test_dataset_empty";
  std::filesystem::remove_all(dir);
  data::write_dataset(dir, {}, 0, cfg);
  EXPECT_EQ(std::distance(std::filesystem::directory_iterator(dir), {}), 1);
  EXPECT_TRUE(data::read_dataset(dir).empty());
  std::filesystem::remove_all(dir);
}
