// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lmlite/model.hpp"
#include "test_util.hpp"

using namespace lmlite;
using ad::Array;
using ad::Shape;
using lmlite::testing::random_array;
using lmlite::testing::max_abs_diff;

namespace {

struct Fixture {
  data::Registry reg = data::Registry::default_registry();
  model::ModelConfig cfg;
  model::ModelParams params = model::init_params(cfg, reg, 5);
};

std::size_t total_size(const std::map<std::string, Array>& m, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [k, v] : m)
    if (k.starts_with(prefix)) n += v.size();
  return n;
}

Array encode(const Fixture& f, const Array& x, std::vector<std::size_t> offsets) {
  ad::Graph g;
  const model::ParamVars p(g, f.params.learned, false);
  return model::encoder_forward(g, p, f.cfg, g.constant(x), offsets).value();
}

Array decode(const Fixture& f, const Array& lat, std::vector<std::size_t> lo, const Array& q,
             std::vector<std::size_t> qo) {
  ad::Graph g;
  const model::ParamVars p(g, f.params.learned, false);
  return model::decoder_forward(g, p, f.cfg, g.constant(lat), lo, g.constant(q), qo).value();
}

Array permute_rows(const Array& a, const std::vector<std::size_t>& perm) {
  Array out(a.shape);
  const std::size_t d = a.dim(1);
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy_n(a.data.begin() + perm[i] * d, d, out.data.begin() + i * d);
  return out;
}

}  // namespace

TEST(ParamCount, BlockClosedForm) {
  for (int d : {8, 64, 128}) {
    const std::size_t dd = static_cast<std::size_t>(d);
    EXPECT_EQ(model::encoder_block_param_count(d, 4), 12 * dd * dd + 13 * dd);
  }
}

TEST(ParamCount, MatchesInitializedArrays) {
  Fixture f;
  EXPECT_EQ(model::encoder_param_count(f.cfg.encoder), total_size(f.params.learned, "enc/"));
  EXPECT_EQ(model::decoder_param_count(f.cfg), total_size(f.params.learned, "dec/"));
  EXPECT_EQ(model::learned_param_count(f.cfg, f.reg, model::TargetMode::Frozen), f.params.learned_count());
  EXPECT_EQ(f.params.learned_count(), total_size(f.params.learned, ""));
  for (const auto& [k, v] : f.params.frozen) EXPECT_EQ(f.params.learned.count(k), 0u) << k;
}

TEST(ParamCount, NanoPresetMatchesReferenceScale) {
  const auto nano = model::ModelConfig::preset("nano");
  EXPECT_EQ(nano.encoder.depth, 4);
  EXPECT_EQ(nano.encoder.dim, 128);
  EXPECT_EQ(nano.encoder.heads, 8);
  const double n = static_cast<double>(model::encoder_param_count(nano.encoder));
  // same order of magnitude as the published 1.4M
  EXPECT_GT(n, 1.4e6 / 3.0);
  EXPECT_LT(n, 1.4e6 * 3.0);
  EXPECT_THROW(model::ModelConfig::preset("huge"), std::invalid_argument);
}

TEST(ModelConfigValidate, DimDivisibleByHeads) {
  model::ModelConfig c;
  c.encoder.heads = 5;
  EXPECT_THROW(model::validate(c), std::invalid_argument);
}

TEST(InitParams, FrozenTargetScale) {
  Fixture f;
  const Array& w = f.params.frozen.at(model::frozen_weight_name("s2_10m"));
  double sq = 0;
  for (double v : w.data) sq += v * v;
  const double var = sq / static_cast<double>(w.size());
  EXPECT_NEAR(var * static_cast<double>(w.dim(0)), 1.0, 0.05);
  for (double v : f.params.frozen.at(model::frozen_bias_name("s2_10m")).data) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(model::hash_arrays(model::init_params(f.cfg, f.reg, 5).frozen), model::hash_arrays(f.params.frozen));
  EXPECT_NE(model::hash_arrays(model::init_params(f.cfg, f.reg, 6).frozen), model::hash_arrays(f.params.frozen));
}

TEST(EncoderForward, SingleTokenIsFinite) {
  Fixture f;
  const Array y = encode(f, random_array({1, 64}, 1), {0, 1});
  EXPECT_EQ(y.shape, (Shape{1, 64}));
  for (double v : y.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(EncoderForward, PermutationEquivariant) {
  Fixture f;
  const Array x = random_array({6, 64}, 2);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  const Array a = permute_rows(encode(f, x, {0, 6}), perm);
  const Array b = encode(f, permute_rows(x, perm), {0, 6});
  EXPECT_LE(max_abs_diff(a, b), 1e-12);
}

TEST(EncoderForward, SamplesDoNotInteract) {
  Fixture f;
  Array x = random_array({7, 64}, 3);
  const Array a = encode(f, x, {0, 4, 7});
  for (std::size_t i = 4 * 64; i < x.size(); ++i) x.data[i] = 0.0;
  const Array b = encode(f, x, {0, 4, 7});
  EXPECT_TRUE(std::equal(a.data.begin(), a.data.begin() + 4 * 64, b.data.begin()));
}

TEST(EncoderForward, EmptyInputFails) {
  Fixture f;
  EXPECT_ANY_THROW(encode(f, Array(Shape{0, 64}), {0, 0}));
}

TEST(DecoderForward, SingleSlot) {
  Fixture f;
  const Array y = decode(f, random_array({3, 64}, 4), {0, 3}, random_array({1, 64}, 5), {0, 1});
  EXPECT_EQ(y.shape, (Shape{1, 64}));
  for (double v : y.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(DecoderForward, IdenticalQueriesGiveIdenticalPredictions) {
  Fixture f;
  const Array q1 = random_array({1, 64}, 6);
  Array q(Shape{2, 64});
  std::copy(q1.data.begin(), q1.data.end(), q.data.begin());
  std::copy(q1.data.begin(), q1.data.end(), q.data.begin() + 64);
  const Array y = decode(f, random_array({3, 64}, 7), {0, 3}, q, {0, 2});
  EXPECT_TRUE(std::equal(y.data.begin(), y.data.begin() + 64, y.data.begin() + 64));
}

TEST(DecoderForward, PermutingSlotsPermutesPredictions) {
  Fixture f;
  const Array lat = random_array({4, 64}, 8);
  const Array q = random_array({5, 64}, 9);
  const std::vector<std::size_t> perm{4, 2, 0, 3, 1};
  const Array a = permute_rows(decode(f, lat, {0, 4}, q, {0, 5}), perm);
  const Array b = decode(f, lat, {0, 4}, permute_rows(q, perm), {0, 5});
  EXPECT_LE(max_abs_diff(a, b), 1e-12);
}

TEST(DecoderForward, NoLatentsFails) {
  Fixture f;
  EXPECT_ANY_THROW(decode(f, Array(Shape{0, 64}), {0, 0}, random_array({1, 64}, 10), {0, 1}));
}

TEST(DecoderForward, Deterministic) {
  Fixture f;
  const Array lat = random_array({4, 64}, 11);
  const Array q = random_array({2, 64}, 12);
  EXPECT_EQ(decode(f, lat, {0, 4}, q, {0, 2}), decode(f, lat, {0, 4}, q, {0, 2}));
}

TEST(PoolInstance, Examples) {
  ad::Graph g;
  const Array v = random_array({1, 5}, 13);
  EXPECT_EQ(model::pool_instance(g.constant(v), std::vector<std::size_t>{0, 1}).value().data, v.data);
  Array opp(Shape{2, 5});
  for (std::size_t c = 0; c < 5; ++c) opp.at(0, c) = v.data[c], opp.at(1, c) = -v.data[c];
  for (double x : model::pool_instance(g.constant(opp), std::vector<std::size_t>{0, 2}).value().data) EXPECT_EQ(x, 0.0);
  Array copies(Shape{4, 5});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 5; ++c) copies.at(r, c) = v.data[c];
  const Array m = model::pool_instance(g.constant(copies), std::vector<std::size_t>{0, 4}).value();
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(m.data[c], v.data[c], 1e-15);
  EXPECT_ANY_THROW(model::pool_instance(g.constant(Array(Shape{0, 5})), std::vector<std::size_t>{0, 0}));
}

TEST(Checkpoint, RoundTrip) {
  Fixture f;
  model::Checkpoint ck;
  ck.config_text = "seed = 3\n";
  ck.step = 17;
  ck.seed = 3;
  ck.frozen_hash = model::hash_arrays(f.params.frozen);
  model::store_params(ck, f.params);
  const auto path = std::filesystem::temp_directory_path() / "lmlite_model_roundtrip.ckpt";
  model::write_checkpoint(path, ck);
  const auto back = model::read_checkpoint(path);
  EXPECT_EQ(back.config_text, ck.config_text);
  EXPECT_EQ(back.step, 17u);
  EXPECT_EQ(back.frozen_hash, ck.frozen_hash);
  EXPECT_EQ(back.arrays, ck.arrays);
  const auto p = model::load_params(back);
  EXPECT_EQ(p.learned, f.params.learned);
  EXPECT_EQ(p.frozen, f.params.frozen);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto path = std::filesystem::temp_directory_path() / "lmlite_model_bad.ckpt";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTACKPT";
  }
  EXPECT_THROW(model::read_checkpoint(path), model::CheckpointError);
  EXPECT_THROW(model::read_checkpoint(path.string() + ".missing"), model::CheckpointError);
  std::filesystem::remove(path);
}
