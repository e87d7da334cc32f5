// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lmlite/config.hpp"
#include "lmlite/eval.hpp"
#include "lmlite/training.hpp"
#include "eval_oracles.hpp"
#include "test_util.hpp"

using namespace lmlite;
using ad::Array;
using ad::Shape;
using lmlite::testing::blobs;
using lmlite::testing::knn_oracle;
using lmlite::testing::random_array;

namespace {

std::vector<int> shuffled(std::vector<int> v, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::shuffle(v.begin(), v.end(), gen);
  return v;
}

struct SmallModel {
  train::PretrainConfig pc;
  eval::Encoder enc;
  eval::TaskData task;

  SmallModel() {
    config::RunConfig rc;
    rc.data.height = rc.data.width = 16;
    rc.data.min_timesteps = 2;
    rc.data.max_timesteps = 3;
    rc.eval.task_count = 40;
    rc.model.encoder.dim = 16;
    rc.model.encoder.heads = 2;
    pc = config::pretrain_config(rc);
    const auto st = train::init_state(pc);
    const auto raw = data::synth_generate(1, 16, config::generator(rc));
    enc = {pc.model, train::effective_registry(pc), st.params,
           data::compute_stats(raw, pc.registry, data::StatsProvenance::Pretraining)};
    task = config::make_task(rc, "cls5");
  }
};

}  // namespace

TEST(Knn, MatchesExhaustiveOracle) {
  std::mt19937_64 gen(1);
  const Array tr = random_array({400, 6}, 2);
  const Array q = random_array({100, 6}, 3);
  std::vector<int> labels(400);
  for (int& l : labels) l = static_cast<int>(gen() % 4);
  EXPECT_EQ(eval::knn_classify(tr, labels, q, 20), knn_oracle(tr, labels, q, 20));
  EXPECT_EQ(eval::knn_classify(tr, labels, q, 4), knn_oracle(tr, labels, q, 4));
}

TEST(Knn, SelfMatchAndScaleInvariance) {
  const Array tr = random_array({30, 5}, 4);
  std::vector<int> labels(30);
  std::iota(labels.begin(), labels.end(), 0);
  EXPECT_EQ(eval::knn_classify(tr, labels, tr, 1), labels);
  const Array q = random_array({10, 5}, 5);
  Array q2 = q, tr3 = tr;
  for (double& v : q2.data) v *= 2.0;
  for (double& v : tr3.data) v *= 3.0;
  EXPECT_EQ(eval::knn_classify(tr, labels, q, 7), eval::knn_classify(tr3, labels, q2, 7));
  EXPECT_ANY_THROW(eval::knn_classify(tr, labels, q, 31));
}

TEST(Metrics, HandComputed) {
  const std::vector<int> pred{0, 0, 1, 1}, truth{0, 1, 1, 1};
  EXPECT_DOUBLE_EQ(eval::accuracy(pred, truth), 0.75);
  EXPECT_DOUBLE_EQ(eval::micro_f1(pred, truth, 3), 0.75);
  // class 0: 1/2, class 1: 2/3, class 2 absent and skipped
  EXPECT_NEAR(eval::mean_iou(pred, truth, 3), (0.5 + 2.0 / 3.0) / 2.0, 1e-15);
}

TEST(Sweep, FirstMaximumWins) {
  std::vector<eval::SweepPoint> g(4);
  g[0].val = 0.5, g[1].val = 0.9, g[2].val = 0.9, g[3].val = 0.1;
  EXPECT_EQ(eval::select_best(g), 1u);
  EXPECT_EQ(eval::select_best(g), eval::select_best(g));
  EXPECT_EQ(eval::default_probe_lrs(), (std::vector<double>{1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1}));
}

TEST(LinearProbe, SeparableBlobs) {
  const auto tr = blobs(200, 1, true, eval::Split::Train);
  const auto va = blobs(100, 2, true, eval::Split::Val);
  const auto te = blobs(200, 3, true, eval::Split::Test);
  const auto r = eval::linear_probe(tr, va, te, eval::ProbeConfig{});
  EXPECT_EQ(r.grid.size(), 8u);
  EXPECT_GE(r.best().test, 0.99);
}

TEST(LinearProbe, ShuffledLabelsStayNearChance) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto tr = blobs(200, 10 + s, true, eval::Split::Train);
    auto va = blobs(200, 20 + s, true, eval::Split::Val);
    auto te = blobs(400, 30 + s, true, eval::Split::Test);
    tr.labels = shuffled(tr.labels, s);
    va.labels = shuffled(va.labels, s + 100);
    te.labels = shuffled(te.labels, s + 200);
    const double acc = eval::linear_probe(tr, va, te, eval::ProbeConfig{}).best().test;
    EXPECT_GE(acc, 0.4) << s;
    EXPECT_LE(acc, 0.6) << s;
  }
}

TEST(LinearProbe, SingleLrGridAndDegenerateLabels) {
  auto tr = blobs(40, 1, true, eval::Split::Train);
  const auto va = blobs(20, 2, true, eval::Split::Val);
  eval::ProbeConfig c;
  c.lrs = {1e-2};
  const auto r = eval::linear_probe(tr, va, va, c);
  ASSERT_EQ(r.grid.size(), 1u);
  EXPECT_EQ(r.selected, 0u);
  std::fill(tr.labels.begin(), tr.labels.end(), 1);
  EXPECT_ANY_THROW(eval::linear_probe(tr, va, va, c));
}

TEST(Plateau, ImprovingNeverCuts) {
  eval::PlateauScheduler s(1e-3, 0.2, 2, 10);
  for (int e = 0; e < 30; ++e) EXPECT_FALSE(s.step(0.01 * e));
  EXPECT_EQ(s.lr(), 1e-3);
}

TEST(Plateau, FlatCutsOnceThenCoolsDown) {
  eval::PlateauScheduler s(1e-3, 0.2, 2, 10);
  EXPECT_FALSE(s.step(0.5));
  EXPECT_FALSE(s.step(0.5));  // 1 bad epoch
  EXPECT_TRUE(s.step(0.5));   // 2 bad epochs
  EXPECT_EQ(s.lr(), 1e-3 * 0.2);
  for (int e = 0; e < 10; ++e) EXPECT_FALSE(s.step(0.5)) << e;
  EXPECT_EQ(s.num_reductions(), 1);
  EXPECT_FALSE(s.step(0.5));
  EXPECT_TRUE(s.step(0.5));
  EXPECT_EQ(s.num_reductions(), 2);
}

TEST(Finetune, FrozenEpochCount) {
  eval::FinetuneRecipe r;
  EXPECT_EQ(eval::frozen_epochs(r), 2);
  r.epochs = 7;
  EXPECT_EQ(eval::frozen_epochs(r), 2);
  r.epochs = 5;
  EXPECT_EQ(eval::frozen_epochs(r), 1);
  r.freeze_fraction = 0.0;
  EXPECT_EQ(eval::frozen_epochs(r), 0);
}

TEST(Finetune, EncoderFrozenForFirstFifthOfEpochs) {
  SmallModel m;
  eval::FinetuneRecipe r;
  r.epochs = 10;
  r.max_timesteps = 2;
  const auto res = eval::finetune(m.enc, m.task, r);
  ASSERT_EQ(res.epochs.size(), 10u);
  for (const auto& e : res.epochs) {
    if (e.epoch <= 2) {
      EXPECT_TRUE(e.encoder_frozen);
      EXPECT_EQ(e.encoder_grad_norm, 0.0) << e.epoch;
    } else {
      EXPECT_FALSE(e.encoder_frozen);
      EXPECT_GT(e.encoder_grad_norm, 0.0) << e.epoch;
    }
  }
  EXPECT_GE(res.best_epoch, 1);
  EXPECT_EQ(res.metric_name, "accuracy");
}

TEST(Finetune, NoFreezeMeansGradientsFromFirstEpoch) {
  SmallModel m;
  eval::FinetuneRecipe r;
  r.epochs = 2;
  r.freeze_fraction = 0.0;
  r.max_timesteps = 2;
  const auto res = eval::finetune(m.enc, m.task, r);
  EXPECT_GT(res.epochs.front().encoder_grad_norm, 0.0);
}

TEST(Finetune, SegmentationHead) {
  SmallModel m;
  config::RunConfig rc;
  rc.data.height = rc.data.width = 16;
  rc.data.min_timesteps = 2;
  rc.data.max_timesteps = 3;
  rc.eval.task_count = 20;
  const auto task = config::make_task(rc, "seg5");
  eval::FinetuneRecipe r;
  r.epochs = 2;
  r.head = eval::HeadKind::TransposedConvSeg;
  r.max_timesteps = 2;
  const auto res = eval::finetune(m.enc, task, r);
  EXPECT_EQ(res.metric_name, "miou");
  EXPECT_GE(res.test_metric, 0.0);
  EXPECT_LE(res.test_metric, 1.0);
}

TEST(Embed, DuplicatesAndPermutations) {
  SmallModel m;
  std::vector<data::Sample> s(m.task.train.begin(), m.task.train.begin() + 3);
  s.push_back(s[0]);
  const auto e = eval::embed(m.enc, s, {}, eval::Split::Train);
  ASSERT_EQ(e.vectors.shape, (Shape{4, 16}));
  for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(e.vectors.at(0, c), e.vectors.at(3, c));
  const std::vector<data::Sample> rev{s[2], s[1], s[0]};
  const auto r = eval::embed(m.enc, rev, {}, eval::Split::Train);
  for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(r.vectors.at(0, c), e.vectors.at(2, c));
}

TEST(Embed, IdenticalTimestepsMeanEqualsMax) {
  SmallModel m;
  data::Sample s = m.task.train[0];
  s.timestamps = {4, 4};
  for (auto& r : s.rasters) {
    if (r.timesteps == 1) continue;
    const std::size_t plane = r.values.size() / r.timesteps;
    std::vector<double> first(r.values.begin(), r.values.begin() + plane);
    r.timesteps = 2;
    r.values = first;
    r.values.insert(r.values.end(), first.begin(), first.end());
    r.present = {r.present[0], r.present[0]};
  }
  eval::EmbedOptions o;
  o.pooling = eval::Pooling::MeanOverTime;
  const auto a = eval::embed(m.enc, std::span(&s, 1), o, eval::Split::Test);
  o.pooling = eval::Pooling::MaxOverTime;
  const auto b = eval::embed(m.enc, std::span(&s, 1), o, eval::Split::Test);
  EXPECT_LE(lmlite::testing::max_abs_diff(a.vectors, b.vectors), 1e-12);
}

TEST(Embed, SharedPassMatchesSinglePooling) {
  SmallModel m;
  const auto s = std::span(m.task.train).first(4);
  const eval::Pooling pools[] = {eval::Pooling::MaxOverTime, eval::Pooling::MeanOverTime};
  const auto both = eval::embed(m.enc, s, {}, pools, eval::Split::Val);
  ASSERT_EQ(both.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    eval::EmbedOptions o;
    o.pooling = pools[k];
    const auto one = eval::embed(m.enc, s, o, eval::Split::Val);
    EXPECT_EQ(both[k].pooling, pools[k]);
    EXPECT_EQ(both[k].labels, one.labels);
    EXPECT_EQ(both[k].vectors.data, one.vectors.data);
  }
}

TEST(Embed, DimMismatchFails) {
  SmallModel m;
  auto bad = m.enc;
  bad.config.encoder.dim = 32;
  EXPECT_ANY_THROW(eval::check_encoder(bad));
  EXPECT_ANY_THROW(eval::embed(bad, std::span(m.task.train).first(1), {}, eval::Split::Train));
}

TEST(Splits, LeakageIsRejected) {
  SmallModel m;
  EXPECT_NO_THROW(eval::check_splits(m.task));
  auto leaky = m.task;
  leaky.test.push_back(leaky.train.front());
  EXPECT_ANY_THROW(eval::check_splits(leaky));
}

TEST(RankSummary, TwoModels) {
  const auto rows = eval::rank_summary({{"A", {{"t1", 0.9}, {"t2", 0.8}}}, {"B", {{"t1", 0.1}, {"t2", 0.2}}}});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].model, "A");
  EXPECT_DOUBLE_EQ(rows[0].mean_inverted_rank, 1.0);
  EXPECT_DOUBLE_EQ(rows[1].mean_inverted_rank, 0.5);
  const auto tied = eval::rank_summary({{"A", {{"t", 0.5}}}, {"B", {{"t", 0.5}}}});
  EXPECT_DOUBLE_EQ(tied[0].mean_inverted_rank, 0.75);
  EXPECT_DOUBLE_EQ(tied[1].mean_inverted_rank, 0.75);
}

TEST(RankSummary, ThreeModelsTwoTasksHandTable) {
  // t1: A > B > C -> 3/3, 2/3, 1/3
  // t2: B = C > A -> ranks 1.5, 1.5, 3 -> 2.5/3, 2.5/3, 1/3
  const auto rows = eval::rank_summary({{"A", {{"t1", 0.9}, {"t2", 0.5}}},
                                        {"B", {{"t1", 0.8}, {"t2", 0.6}}},
                                        {"C", {{"t1", 0.7}, {"t2", 0.6}}}});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].model, "B");
  EXPECT_NEAR(rows[0].mean_inverted_rank, 0.75, 1e-12);
  EXPECT_EQ(rows[1].model, "A");
  EXPECT_NEAR(rows[1].mean_inverted_rank, 2.0 / 3.0, 1e-12);
  EXPECT_EQ(rows[2].model, "C");
  EXPECT_NEAR(rows[2].mean_inverted_rank, 3.5 / 6.0, 1e-12);
  for (const auto& r : rows) EXPECT_EQ(r.tasks, 2);
  EXPECT_NE(eval::rank_table_text(rows).find("B"), std::string::npos);
  EXPECT_EQ(eval::rank_table_csv(rows).substr(0, 5), "model");
}

TEST(RankSummary, MissingEntriesExcluded) {
  const auto rows = eval::rank_summary({{"A", {{"t1", 0.9}, {"t2", 0.1}}}, {"B", {{"t1", 0.5}}}});
  // t1: A 1, B 0.5; t2: A alone -> 1
  EXPECT_EQ(rows[0].model, "A");
  EXPECT_DOUBLE_EQ(rows[0].mean_inverted_rank, 1.0);
  EXPECT_EQ(rows[1].tasks, 1);
  EXPECT_DOUBLE_EQ(rows[1].mean_inverted_rank, 0.5);
}

TEST(Report, JsonIsStable) {
  eval::EvalReport r;
  r.task = "cls5";
  r.model = "m";
  r.mode = "knn";
  r.metric_name = "accuracy";
  r.provenance = {{"k", "20"}, {"similarity", "cosine"}};
  r.sweep.grid.push_back({{{"pooling", "mean"}}, 0.5, 0.25});
  const std::string j = eval::to_json(r);
  EXPECT_EQ(j, eval::to_json(r));
  EXPECT_NE(j.find("\"similarity\": \"cosine\""), std::string::npos) << j;
  EXPECT_NE(eval::to_text(r).find("0.25"), std::string::npos);
}
