// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmlite/datamodel.hpp"
#include "lmlite/masking.hpp"
#include "lmlite/model.hpp"
#include "lmlite/objectives.hpp"
#include "lmlite/tokenizer.hpp"

namespace lmlite::train {

using ad::Array;
using ParamMap = std::map<std::string, Array>;

struct OptimConfig {
  double base_lr = 1e-4;
  double weight_decay = 0.02;
  int batch_size = 32;
  int micro_batch_size = 8;
  std::uint64_t warmup_steps = 200;
  std::uint64_t total_steps = 2000;
  double final_lr_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Every violated constraint, empty when valid.
std::vector<std::string> check(const OptimConfig& c);

/// Linear warm-up from 0 to base_lr, then cosine down to
/// final_lr_fraction * base_lr at total_steps.
double lr_at(std::uint64_t step, const OptimConfig& c);

struct AdamState {
  ParamMap m;
  ParamMap v;
  std::uint64_t t = 0;
};

/// Decoupled-decay AdamW. Returns false and leaves everything untouched when
/// any gradient is non-finite.
bool adamw_step(ParamMap& params, AdamState& state, const ParamMap& grads, double lr, const OptimConfig& c);

/// One row of the development/ablation matrices.
struct AblationSpec {
  std::string name = "final";
  model::TargetMode target_mode = model::TargetMode::Frozen;
  mask::MaskingMode masking_mode = mask::MaskingMode::ModalityAware;
  obj::NegativeScope negative_scope = obj::NegativeScope::SameBandset;
  double lambda_inst = 0.1;
  bool use_maps = true;

  friend bool operator==(const AblationSpec&, const AblationSpec&) = default;
};

/// "table4" (6 development-path arms) or "table5" (6 removal arms).
std::vector<AblationSpec> ablation_matrix(const std::string& name);

struct PretrainConfig {
  data::Registry registry = data::Registry::default_registry();
  tok::TokenizerConfig tokenizer;
  mask::MaskConfig masking;
  model::ModelConfig model;
  obj::LossConfig loss;
  OptimConfig optim;
  model::TargetMode target_mode = model::TargetMode::Frozen;
  bool use_maps = true;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 500;  // 0 = only the final checkpoint
  int probe_samples = 8;
  double collapse_fraction = 0.1;  // detector threshold relative to initial probe variance
  int threads = 1;
};

/// Overwrites the fields an ablation row controls.
void apply_ablation(const AblationSpec& spec, PretrainConfig& config);
AblationSpec ablation_of(const PretrainConfig& config, std::string name = "custom");

std::vector<std::string> check(const PretrainConfig& c);

/// Registry actually used for tokens and parameters (maps dropped when
/// use_maps is off).
data::Registry effective_registry(const PretrainConfig& c);

struct TrainState {
  std::uint64_t step = 0;  // optimizer updates applied
  std::uint64_t seed = 0;
  model::ModelParams params;
  AdamState adam;
};

TrainState init_state(const PretrainConfig& c);

struct MicroBatchResult {
  ParamMap grads;
  obj::LossBreakdown loss;
  bool finite = true;
};

/// Tokenize once, draw two mask plans, encode/decode both views and
/// backpropagate the combined loss. All randomness derives from `stream`.
MicroBatchResult compute_micro_batch(const TrainState& state, const PretrainConfig& c,
                                     std::span<const data::Sample> samples, std::uint64_t stream);

/// Mean of the micro-batch gradients.
ParamMap mean_gradients(std::span<const MicroBatchResult> parts);
double global_norm(const ParamMap& grads);

struct StepMetrics {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_patch_v0 = 0.0;
  double loss_patch_v1 = 0.0;
  double loss_inst = 0.0;
  double target_variance = 0.0;
  double grad_norm = 0.0;
};

std::string to_json_line(const StepMetrics& m);

/// Applies the mean gradient of `parts` as optimizer update number state.step.
/// Returns false (state untouched) on a non-finite loss or gradient.
bool apply_update(TrainState& state, const PretrainConfig& c, std::span<const MicroBatchResult> parts,
                  StepMetrics* metrics = nullptr);

/// Sample indices of optimizer step `step` (without replacement).
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t dataset_size,
                                       int batch_size);

/// Full optimizer step over batch_size samples in micro-batches.
StepMetrics pretrain_step(TrainState& state, const PretrainConfig& c, std::span<const data::Sample> batch);

/// Fixed tokens used to track target variance across a run.
struct ProbeBatch {
  tok::TokenBatch batch;
  std::vector<std::size_t> rows;  // observation tokens
};

ProbeBatch make_probe(std::span<const data::Sample> samples, const PretrainConfig& c);
double probe_target_variance(const ProbeBatch& probe, const model::ModelParams& params, const PretrainConfig& c);

struct CheckpointRecord {
  std::uint64_t step = 0;
  std::filesystem::path path;
  std::uint64_t frozen_hash = 0;
  double probe_variance = 0.0;
};

struct PretrainResult {
  TrainState state;
  data::NormStats stats;
  std::vector<StepMetrics> history;
  std::vector<CheckpointRecord> checkpoints;
  bool halted = false;
  std::string halt_reason;
  double initial_target_variance = 0.0;
  bool collapse_detected = false;
  std::optional<std::uint64_t> collapse_step;
  std::uint64_t frozen_hash = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  std::string config_text;        // echoed into checkpoints
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const StepMetrics&)> on_step;
};

/// Normalizes the raw samples with pretraining statistics, then runs
/// total_steps optimizer steps. Writes metrics.jsonl, checkpoints.jsonl and
/// ckpt_XXXXXX.lmlc files when out_dir is set.
PretrainResult pretrain(const PretrainConfig& c, std::span<const data::Sample> raw_samples,
                        const PretrainOptions& options = {});

model::Checkpoint make_checkpoint(const TrainState& state, const data::NormStats& stats, const std::string& config_text);
TrainState restore_state(const model::Checkpoint& ckpt);
data::NormStats restore_stats(const model::Checkpoint& ckpt);

}  // namespace lmlite::train
