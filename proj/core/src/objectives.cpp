// SPDX-License-Identifier: Apache-2.0
#include "lmlite/objectives.hpp"

#include <cmath>
#include <map>

namespace lmlite::obj {

using data::ModalityKind;

std::string to_string(NegativeScope s) {
  switch (s) {
    case NegativeScope::SameBandset: return "same_bandset";
    case NegativeScope::SameModality: return "same_modality";
    case NegativeScope::Global: return "global";
  }
  return "?";
}

std::string to_string(ScopeUnit u) { return u == ScopeUnit::MicroBatch ? "micro_batch" : "sample"; }

NegativeScope negative_scope_from_string(const std::string& s) {
  if (s == "same_bandset") return NegativeScope::SameBandset;
  if (s == "same_modality") return NegativeScope::SameModality;
  if (s == "global") return NegativeScope::Global;
  throw std::invalid_argument("unknown negative scope '" + s + "'");
}

ScopeUnit scope_unit_from_string(const std::string& s) {
  if (s == "micro_batch") return ScopeUnit::MicroBatch;
  if (s == "sample") return ScopeUnit::Sample;
  throw std::invalid_argument("unknown scope unit '" + s + "'");
}

void validate(const LossConfig& c) {
  if (!(c.tau_patch > 0.0) || !(c.tau_inst > 0.0)) throw std::invalid_argument("loss: temperatures must be > 0");
  if (!(c.lambda_inst >= 0.0)) throw std::invalid_argument("loss: lambda_inst must be >= 0");
  if (!(c.smooth_l1_beta > 0.0)) throw std::invalid_argument("loss: smooth_l1_beta must be > 0");
  if (!(c.ema_momentum >= 0.0 && c.ema_momentum < 1.0)) throw std::invalid_argument("loss: ema_momentum must be in [0, 1)");
}

Array project_targets(const model::ModelParams& params, const tok::TokenBatch& batch,
                      std::span<const std::size_t> rows, const data::Registry& registry) {
  if (rows.empty()) throw std::invalid_argument("project_targets: no target rows");
  std::size_t d = 0;
  Array out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& id = registry.bandset(batch.metas.at(rows[i]).bandset).spec.id;
    auto wit = params.frozen.find(model::frozen_weight_name(id));
    if (wit == params.frozen.end()) throw std::invalid_argument("project_targets: unknown bandset '" + id + "'");
    const Array& W = wit->second;
    const Array& b = params.frozen.at(model::frozen_bias_name(id));
    if (i == 0) {
      d = W.dim(1);
      out = Array(ad::Shape{rows.size(), d});
    }
    const auto raw = batch.raw_patch(rows[i]);
    if (raw.size() != W.dim(0)) throw std::invalid_argument("project_targets: patch size mismatch for '" + id + "'");
    double* o = out.data.data() + i * d;
    for (std::size_t c = 0; c < d; ++c) o[c] = b.data[c];
    for (std::size_t k = 0; k < raw.size(); ++k) {
      const double x = raw[k];
      if (x == 0.0) continue;
      const double* w = W.data.data() + k * d;
      for (std::size_t c = 0; c < d; ++c) o[c] += x * w[c];
    }
  }
  return out;
}

double target_variance(const Array& t) {
  if (t.rank() != 2 || t.dim(0) == 0) throw std::invalid_argument("target_variance: expected non-empty [M, d]");
  const std::size_t m = t.dim(0);
  const std::size_t d = t.dim(1);
  double total = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += t.at(i, c);
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) var += (t.at(i, c) - mean) * (t.at(i, c) - mean);
    total += var / static_cast<double>(m);
  }
  return total / static_cast<double>(d);
}

std::vector<std::uint64_t> scope_keys(std::span<const tok::TokenMeta> metas, NegativeScope scope, ScopeUnit unit) {
  std::vector<std::uint64_t> keys(metas.size());
  for (std::size_t i = 0; i < metas.size(); ++i) {
    std::uint64_t k = 0;
    if (scope == NegativeScope::SameBandset) k = metas[i].bandset + 1;
    if (scope == NegativeScope::SameModality) k = metas[i].modality + 1;
    if (unit == ScopeUnit::Sample) k |= static_cast<std::uint64_t>(metas[i].sample) << 32;
    keys[i] = k;
  }
  return keys;
}

Var patch_discrimination_loss(Var predictions, Var targets, std::span<const std::uint64_t> keys, double tau,
                              PatchDiscStats* stats, bool capture) {
  const auto ps = predictions.shape();
  if (ps.size() != 2 || ps[0] == 0 || ps != targets.shape()) {
    throw std::invalid_argument("patch_discrimination_loss: predictions " + ad::shape_str(ps) + " and targets " +
                                ad::shape_str(targets.shape()) + " must be equal non-empty [M, d]");
  }
  if (keys.size() != ps[0]) throw std::invalid_argument("patch_discrimination_loss: one key per row required");
  if (!(tau > 0.0)) throw std::invalid_argument("patch_discrimination_loss: tau must be > 0");

  if (stats) {
    for (const Var* v : {&predictions, &targets}) {
      const Array& a = v->value();
      for (std::size_t i = 0; i < ps[0]; ++i) {
        double n2 = 0.0;
        for (std::size_t c = 0; c < ps[1]; ++c) n2 += a.at(i, c) * a.at(i, c);
        if (std::sqrt(n2) < 1e-12) ++stats->zero_norm_rows;
      }
    }
  }

  std::map<std::uint64_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < keys.size(); ++i) groups[keys[i]].push_back(i);

  Var pn = ad::l2_normalize(predictions);
  Var tn = ad::l2_normalize(targets);
  std::vector<Var> sums;
  for (const auto& [key, rows] : groups) {
    if (stats && capture) stats->candidate_sets.push_back(rows);
    const bool all = rows.size() == ps[0];
    Var p = all ? pn : ad::gather_rows(pn, rows);
    Var t = all ? tn : ad::gather_rows(tn, rows);
    Var logits = ad::scale(ad::matmul(p, ad::transpose(t)), 1.0 / tau);
    std::vector<std::size_t> diag(rows.size());
    for (std::size_t k = 0; k < diag.size(); ++k) diag[k] = k;
    sums.push_back(ad::sum(ad::pick(ad::log_softmax(logits), diag)));
  }
  Var total = sums[0];
  for (std::size_t k = 1; k < sums.size(); ++k) total = ad::add(total, sums[k]);
  return ad::scale(total, -1.0 / static_cast<double>(ps[0]));
}

Var instance_contrastive_loss(Var view0, Var view1, double tau) {
  const auto s = view0.shape();
  if (s.size() != 2 || s != view1.shape()) {
    throw std::invalid_argument("instance_contrastive_loss: views must share shape [B, d]");
  }
  const std::size_t B = s[0];
  if (B < 2) throw std::invalid_argument("instance_contrastive_loss: B >= 2 required for negatives");
  if (!(tau > 0.0)) throw std::invalid_argument("instance_contrastive_loss: tau must be > 0");
  Graph& g = *view0.graph;
  Var z = ad::l2_normalize(ad::concat({view0, view1}, 0));
  Var sim = ad::scale(ad::matmul(z, ad::transpose(z)), 1.0 / tau);
  // Self-similarity is excluded from every softmax.
  Array self_mask(ad::Shape{2 * B, 2 * B}, 0.0);
  for (std::size_t i = 0; i < 2 * B; ++i) self_mask.at(i, i) = -1e9;
  Var logits = ad::add(sim, g.constant(std::move(self_mask)));
  std::vector<std::size_t> pos(2 * B);
  for (std::size_t i = 0; i < 2 * B; ++i) pos[i] = (i + B) % (2 * B);
  return ad::scale(ad::sum(ad::pick(ad::log_softmax(logits), pos)), -1.0 / static_cast<double>(2 * B));
}

Var pixel_reconstruction_loss(Graph& g, const model::ParamVars& params, Var predictions,
                              const tok::TokenBatch& batch, std::span<const std::size_t> rows,
                              const data::Registry& registry, double beta) {
  if (rows.empty() || predictions.shape()[0] != rows.size()) {
    throw std::invalid_argument("pixel_reconstruction_loss: one prediction per target row required");
  }
  std::map<std::uint32_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < rows.size(); ++i) groups[batch.metas.at(rows[i]).bandset].push_back(i);
  std::vector<Var> sums;
  std::size_t count = 0;
  for (const auto& [b, pos] : groups) {
    const std::string name = "pixel_head/" + registry.bandset(b).spec.id;
    const std::size_t pix = batch.raw_patch(rows[pos[0]]).size();
    Array truth(ad::Shape{pos.size(), pix});
    for (std::size_t k = 0; k < pos.size(); ++k) {
      const auto raw = batch.raw_patch(rows[pos[k]]);
      std::copy(raw.begin(), raw.end(), truth.data.begin() + static_cast<std::ptrdiff_t>(k * pix));
    }
    Var rec = ad::add(ad::matmul(ad::gather_rows(predictions, pos), params[name + "/w"]), params[name + "/b"]);
    sums.push_back(ad::sum(ad::smooth_l1(rec, g.constant(std::move(truth)), beta)));
    count += pos.size() * pix;
  }
  Var total = sums[0];
  for (std::size_t k = 1; k < sums.size(); ++k) total = ad::add(total, sums[k]);
  return ad::scale(total, 1.0 / static_cast<double>(count));
}

Array ema_targets(const model::ModelParams& params, const model::ModelConfig& config, const tok::TokenBatch& batch,
                  std::span<const std::size_t> rows, const data::Registry& registry) {
  if (params.ema.empty()) throw std::invalid_argument("ema_targets: model has no EMA encoder");
  std::vector<std::size_t> all;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> where(batch.size(), SIZE_MAX);
  for (std::size_t s = 0; s < batch.num_samples(); ++s) {
    for (std::size_t i = batch.sample_offsets[s]; i < batch.sample_offsets[s + 1]; ++i) {
      if (registry.bandset(batch.metas[i].bandset).kind == ModalityKind::Map) continue;
      where[i] = all.size();
      all.push_back(i);
    }
    offsets.push_back(all.size());
  }
  Graph g;
  model::ParamVars p(g, params.ema, false);
  const Array latents =
      model::encoder_forward(g, p, config, model::embed_tokens(g, p, batch, all, registry), offsets).value();
  const std::size_t d = latents.dim(1);
  Array out(ad::Shape{rows.size(), d});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (where.at(rows[k]) == SIZE_MAX) throw std::invalid_argument("ema_targets: map rows have no latent target");
    std::copy_n(latents.data.begin() + static_cast<std::ptrdiff_t>(where[rows[k]] * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(k * d));
  }
  return out;
}

void ema_update(model::ModelParams& params, double momentum) {
  for (auto& [name, e] : params.ema) {
    const Array& src = params.learned.at(name);
    for (std::size_t i = 0; i < e.size(); ++i) e.data[i] = momentum * e.data[i] + (1.0 - momentum) * src.data[i];
  }
}

CombinedLoss combined_loss(Var patch_v0, Var patch_v1, const Var* inst, double lambda) {
  CombinedLoss out;
  Var total = ad::add(patch_v0, patch_v1);
  out.breakdown.patch_v0 = patch_v0.value().item();
  out.breakdown.patch_v1 = patch_v1.value().item();
  if (inst != nullptr) {
    out.breakdown.inst = inst->value().item();
    if (lambda != 0.0) total = ad::add(total, ad::scale(*inst, lambda));
  }
  out.total = total;
  out.breakdown.total = total.value().item();
  return out;
}

}  // namespace lmlite::obj
