// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lmlite/autodiff.hpp"
#include "lmlite/model.hpp"
#include "lmlite/tokenizer.hpp"

namespace lmlite::obj {

using ad::Array;
using ad::Graph;
using ad::Var;

/// Which target rows compete as negatives for a prediction.
enum class NegativeScope { SameBandset, SameModality, Global };
/// Whether candidate sets span the micro-batch or stay inside one sample.
enum class ScopeUnit { MicroBatch, Sample };

std::string to_string(NegativeScope s);
std::string to_string(ScopeUnit u);
NegativeScope negative_scope_from_string(const std::string& s);
ScopeUnit scope_unit_from_string(const std::string& s);

struct LossConfig {
  double tau_patch = 0.1;
  double tau_inst = 0.1;
  double lambda_inst = 0.1;
  NegativeScope negative_scope = NegativeScope::SameBandset;
  ScopeUnit scope_unit = ScopeUnit::MicroBatch;
  double smooth_l1_beta = 1.0;  // pixel-target arm only
  double ema_momentum = 0.99;   // EMA-target arm only
};

void validate(const LossConfig& c);

/// raw_patch · W_frozen + b_frozen for the given token rows. The result is a
/// plain array: frozen weights never enter a gradient graph.
Array project_targets(const model::ModelParams& params, const tok::TokenBatch& batch,
                      std::span<const std::size_t> rows, const data::Registry& registry);

/// Population variance per dimension averaged over dimensions.
double target_variance(const Array& targets);

/// Candidate-set key per target row; rows sharing a key form one softmax.
std::vector<std::uint64_t> scope_keys(std::span<const tok::TokenMeta> metas, NegativeScope scope, ScopeUnit unit);

struct PatchDiscStats {
  std::vector<std::vector<std::size_t>> candidate_sets;  // filled when capture is on
  std::size_t zero_norm_rows = 0;                        // rows guarded by the cosine epsilon
};

/// Mean over rows of -log softmax_j(cos(pred_i, target_j) / tau)[i], with j
/// ranging over rows sharing row i's key.
Var patch_discrimination_loss(Var predictions, Var targets, std::span<const std::uint64_t> keys, double tau,
                              PatchDiscStats* stats = nullptr, bool capture = false);

/// NT-Xent over 2B pooled embeddings; positives are the paired view.
Var instance_contrastive_loss(Var view0, Var view1, double tau);

/// Pixel-space Smooth-L1 through per-bandset linear heads (MAE arm).
Var pixel_reconstruction_loss(Graph& g, const model::ParamVars& params, Var predictions,
                              const tok::TokenBatch& batch, std::span<const std::size_t> rows,
                              const data::Registry& registry, double beta);

/// Latent targets from the EMA encoder run on every observation token of the
/// view, read out at the target rows (full Latent MIM arm).
Array ema_targets(const model::ModelParams& params, const model::ModelConfig& config, const tok::TokenBatch& batch,
                  std::span<const std::size_t> rows, const data::Registry& registry);

/// p <- m p + (1 - m) q for every EMA entry.
void ema_update(model::ModelParams& params, double momentum);

struct LossBreakdown {
  double total = 0.0;
  double patch_v0 = 0.0;
  double patch_v1 = 0.0;
  double inst = 0.0;  // unweighted
};

struct CombinedLoss {
  Var total;
  LossBreakdown breakdown;
};

/// patch_v0 + patch_v1 + lambda * inst. `inst` may be null (lambda = 0 arms).
CombinedLoss combined_loss(Var patch_v0, Var patch_v1, const Var* inst, double lambda);

}  // namespace lmlite::obj
