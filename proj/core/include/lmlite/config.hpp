// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lmlite/datamodel.hpp"
#include "lmlite/eval.hpp"
#include "lmlite/training.hpp"

namespace lmlite::config {

struct DataSection {
  std::size_t count = 512;
  int map_classes = 5;
  int height = 32;
  int width = 32;
  int min_timesteps = 4;
  int max_timesteps = 8;
  int latent_channels = 3;
  double noise_scale = 0.1;
  double nuisance_scale = 3.0;
  double presence_prob = 0.9;
  double modality_drop_prob = 0.1;
  std::uint64_t mixing_seed = 7;
};

struct EvalSection {
  std::string task = "cls5";
  std::size_t task_count = 400;  // samples generated for a task, split 60/20/20
  int k = 20;
  int patch_size = 8;
  int max_timesteps = 0;
  std::string pooling = "mean,max";  // swept
  std::string norm = "pretraining,eval_set";  // swept
  int probe_epochs = 50;
  int finetune_epochs = 10;
  double finetune_lr = 1e-3;
  double finetune_weight_decay = 0.01;
  int finetune_batch = 16;
  int finetune_max_timesteps = 4;
  std::string head = "linear";
};

struct AblationSection {
  std::string name = "final";
  std::string target = "frozen";
  bool use_maps = true;
};

/// Everything a command needs; every field has a default.
struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  std::uint64_t checkpoint_every = 500;
  int probe_samples = 8;
  double collapse_fraction = 0.1;
  DataSection data;
  tok::TokenizerConfig tokenizer = desk_tokenizer();
  mask::MaskConfig masking;
  model::ModelConfig model;
  obj::LossConfig loss;
  train::OptimConfig optim = desk_optim();
  EvalSection eval;
  AblationSection ablation;

  static tok::TokenizerConfig desk_tokenizer();
  static train::OptimConfig desk_optim();
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses "[section]" headers and "key = value" lines on top of the
/// defaults. Unknown sections or keys, malformed values and duplicate keys
/// all raise ConfigError with the line number.
RunConfig parse(const std::string& text);
RunConfig load(const std::string& path);

/// "section.key=value" (or "key=value" for top-level fields).
void apply_override(RunConfig& c, const std::string& assignment);

/// Every field, sections in a fixed order; parse(serialize(c)) == c.
std::string serialize(const RunConfig& c);

/// Every "section.key" accepted by parse, in serialization order.
std::vector<std::string> known_keys();

/// Field-level problems from every module validator, collected.
std::vector<std::string> check(const RunConfig& c);

data::GeneratorConfig generator(const RunConfig& c);
train::PretrainConfig pretrain_config(const RunConfig& c);

/// Writes the ablation section into a config (and reads it back).
void set_ablation(RunConfig& c, const train::AblationSpec& spec);

// ---------------------------------------------------------------------------
// Evaluation tasks on synthetic data

struct TaskSpec {
  std::string name;
  bool segmentation = false;
  int num_classes = 0;
};

/// cls5 and cls3 label a sample by its majority map class; seg5 predicts the
/// per-pixel map class.
TaskSpec task_spec(const std::string& name);
std::vector<std::string> task_names();

/// Held-out task samples (seeded apart from pretraining data), split
/// 60/20/20 into train/val/test by location id.
eval::TaskData make_task(const RunConfig& c, const std::string& name);

}  // namespace lmlite::config
