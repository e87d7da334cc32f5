// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmlite/autodiff.hpp"
#include "lmlite/datamodel.hpp"
#include "lmlite/model.hpp"

namespace lmlite::eval {

using ad::Array;

enum class Pooling { MeanOverTime, MaxOverTime };
enum class Split { Train, Val, Test };
std::string to_string(Pooling p);
std::string to_string(Split s);
Pooling pooling_from_string(const std::string& s);

/// Everything needed to run a pretrained encoder on raw samples.
struct Encoder {
  model::ModelConfig config;
  data::Registry registry;  // effective registry the parameters were built for
  model::ModelParams params;
  data::NormStats stats;    // pretraining statistics
};

/// Fails when parameter shapes disagree with the config (e.g. a dim mismatch).
void check_encoder(const Encoder& enc);

struct EmbedOptions {
  int patch_size = 8;
  int max_timesteps = 0;  // 0 = every timestep
  Pooling pooling = Pooling::MeanOverTime;
  // Statistics to normalize with; defaults to the encoder's pretraining stats.
  std::optional<data::NormStats> stats_override;
};

struct EmbeddingSet {
  Array vectors;  // [n, dim]
  std::vector<int> labels;
  std::vector<std::int64_t> location_ids;
  Split split = Split::Train;
  Pooling pooling = Pooling::MeanOverTime;
  data::StatsProvenance norm = data::StatsProvenance::Pretraining;

  std::size_t size() const { return labels.size(); }
};

/// Unmasked encoder pass; per spatial position the tokens of every timestep
/// and bandset are pooled (mean or max), then positions are averaged.
EmbeddingSet embed(const Encoder& enc, std::span<const data::Sample> samples, const EmbedOptions& options,
                   Split split);

/// Same, for several poolings from one encoder pass; options.pooling is ignored.
std::vector<EmbeddingSet> embed(const Encoder& enc, std::span<const data::Sample> samples, const EmbedOptions& options,
                                std::span<const Pooling> poolings, Split split);

/// Per-position embeddings [n, grid*grid, dim], pooled over time only.
Array embed_spatial(const Encoder& enc, std::span<const data::Sample> samples, const EmbedOptions& options);

/// Cosine-similarity kNN. Majority vote over the k most similar training
/// vectors (similarity ties: lower training index first); vote ties go to the
/// larger summed similarity, then to the lower class id.
std::vector<int> knn_classify(const Array& train, std::span<const int> train_labels, const Array& queries, int k);

// ---------------------------------------------------------------------------
// Metrics

double accuracy(std::span<const int> pred, std::span<const int> truth);
/// Micro-averaged F1 over all classes.
double micro_f1(std::span<const int> pred, std::span<const int> truth, int num_classes);
/// Mean IoU over classes present in prediction or truth.
double mean_iou(std::span<const int> pred, std::span<const int> truth, int num_classes);

// ---------------------------------------------------------------------------
// Sweeps

struct SweepPoint {
  std::map<std::string, std::string> params;  // printable hyperparameters
  double val = 0.0;
  double test = 0.0;
};

struct SweepResult {
  std::vector<SweepPoint> grid;
  std::size_t selected = 0;

  const SweepPoint& best() const { return grid.at(selected); }
};

/// argmax of val; the earliest grid point wins ties.
std::size_t select_best(std::span<const SweepPoint> grid);

const std::vector<double>& default_probe_lrs();

struct ProbeConfig {
  std::vector<double> lrs = default_probe_lrs();
  int epochs = 50;
  std::uint64_t seed = 0;
};

/// Linear softmax classifier per learning rate, full-batch AdamW without
/// weight decay; selection on val accuracy.
SweepResult linear_probe(const EmbeddingSet& train, const EmbeddingSet& val, const EmbeddingSet& test,
                         const ProbeConfig& config);

// ---------------------------------------------------------------------------
// Fine-tuning

enum class HeadKind { Linear, Mlp3, TransposedConvSeg };
std::string to_string(HeadKind h);
HeadKind head_kind_from_string(const std::string& s);

/// Reduce-on-plateau for a maximized metric. A cut fires once `patience`
/// consecutive epochs fail to improve on the best value; the following
/// `cooldown` epochs cannot trigger another cut.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, int patience, int cooldown);
  /// Feeds one epoch's val metric; returns true when the lr was cut.
  bool step(double metric);
  double lr() const { return lr_; }
  int num_reductions() const { return reductions_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  int cooldown_;
  double best_;
  int bad_epochs_ = 0;
  int cooldown_left_ = 0;
  int reductions_ = 0;
  bool first_ = true;
};

struct FinetuneRecipe {
  int epochs = 10;
  double freeze_fraction = 0.2;
  double plateau_factor = 0.2;
  int patience = 2;
  int cooldown = 10;
  HeadKind head = HeadKind::Linear;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 16;
  int patch_size = 8;
  int max_timesteps = 4;
  std::uint64_t seed = 0;
};

/// Number of leading epochs with a frozen encoder: ceil(freeze_fraction * epochs).
int frozen_epochs(const FinetuneRecipe& r);

struct FinetuneEpoch {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  bool encoder_frozen = false;
  double encoder_grad_norm = 0.0;  // first batch of the epoch
  double train_loss = 0.0;
  double val_metric = 0.0;
};

struct FinetuneResult {
  std::vector<FinetuneEpoch> epochs;
  int best_epoch = 0;
  double best_val = 0.0;
  double test_metric = 0.0;
  std::string metric_name;
  model::ModelParams best_params;  // encoder + head at the best val epoch
  SweepResult sweep;
};

struct TaskData {
  std::string name;
  bool segmentation = false;
  int num_classes = 0;
  std::string map_bandset;  // segmentation target raster
  std::vector<data::Sample> train;
  std::vector<data::Sample> val;
  std::vector<data::Sample> test;
};

/// Fails when a location id occurs in more than one split.
void check_splits(const TaskData& task);

FinetuneResult finetune(const Encoder& enc, const TaskData& task, const FinetuneRecipe& recipe);

// ---------------------------------------------------------------------------
// Cross-model comparison

struct RankRow {
  std::string model;
  double mean_inverted_rank = 0.0;
  int tasks = 0;
};

/// results[model][task] = metric (higher is better). Ranks per task use
/// average ranks for ties; inverted rank = (n - rank + 1) / n over the models
/// that report that task.
std::vector<RankRow> rank_summary(const std::map<std::string, std::map<std::string, double>>& results);
std::string rank_table_text(const std::vector<RankRow>& rows);
std::string rank_table_csv(const std::vector<RankRow>& rows);

// ---------------------------------------------------------------------------

struct EvalReport {
  std::string task;
  std::string model;
  std::string mode;  // knn | lp | finetune
  std::string metric_name;
  std::map<std::string, std::string> provenance;
  SweepResult sweep;
  std::vector<FinetuneEpoch> epochs;  // finetune only

  double test_metric() const { return sweep.best().test; }
};

/// Stable JSON text (sorted keys, fixed float formatting).
std::string to_json(const EvalReport& r);
/// Human-readable table of the sweep.
std::string to_text(const EvalReport& r);

}  // namespace lmlite::eval
