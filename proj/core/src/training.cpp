// SPDX-License-Identifier: Apache-2.0
#include "lmlite/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <numbers>

#include <nlohmann/json.hpp>

#include "lmlite/rng.hpp"

namespace lmlite::train {

using data::ModalityKind;
using nlohmann::json;

std::vector<std::string> check(const OptimConfig& c) {
  std::vector<std::string> e;
  if (!(c.base_lr > 0.0)) e.push_back("optim.base_lr must be > 0");
  if (!(c.weight_decay >= 0.0)) e.push_back("optim.weight_decay must be >= 0");
  if (c.batch_size < 1) e.push_back("optim.batch_size must be >= 1");
  if (c.micro_batch_size < 1) e.push_back("optim.micro_batch_size must be >= 1");
  if (c.batch_size >= 1 && c.micro_batch_size >= 1 && c.batch_size % c.micro_batch_size != 0) {
    e.push_back("optim.micro_batch_size must divide optim.batch_size");
  }
  if (c.total_steps > 0 && c.warmup_steps >= c.total_steps) e.push_back("optim.warmup_steps must be < optim.total_steps");
  if (!(c.final_lr_fraction >= 0.0 && c.final_lr_fraction <= 1.0)) e.push_back("optim.final_lr_fraction must be in [0, 1]");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) e.push_back("optim.beta1/beta2 must be in [0, 1)");
  if (!(c.eps > 0.0)) e.push_back("optim.eps must be > 0");
  return e;
}

double lr_at(std::uint64_t step, const OptimConfig& c) {
  if (step > c.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                            std::to_string(c.total_steps));
  }
  if (step < c.warmup_steps) return c.base_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const double floor = c.final_lr_fraction * c.base_lr;
  const std::uint64_t span = c.total_steps - c.warmup_steps;
  if (span == 0) return c.base_lr;
  const double progress = static_cast<double>(step - c.warmup_steps) / static_cast<double>(span);
  return floor + (c.base_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

bool adamw_step(ParamMap& params, AdamState& state, const ParamMap& grads, double lr, const OptimConfig& c) {
  for (const auto& [name, g] : grads) {
    if (!params.count(name)) throw std::invalid_argument("adamw_step: gradient for unknown parameter '" + name + "'");
    if (g.shape != params.at(name).shape) throw std::invalid_argument("adamw_step: gradient shape mismatch for '" + name + "'");
    for (double v : g.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    Array& m = state.m.try_emplace(name, Array(p.shape, 0.0)).first->second;
    Array& v = state.v.try_emplace(name, Array(p.shape, 0.0)).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = git == grads.end() ? 0.0 : git->second.data[i];
      p.data[i] -= lr * c.weight_decay * p.data[i];
      m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * g;
      v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
  return true;
}

// ---------------------------------------------------------------------------

std::vector<AblationSpec> ablation_matrix(const std::string& name) {
  using model::TargetMode;
  using mask::MaskingMode;
  using obj::NegativeScope;
  if (name == "table4") {
    return {
        {"full_latent_mim", TargetMode::Ema, MaskingMode::UniformRandom, NegativeScope::Global, 0.0, false},
        {"latent_mim_lite", TargetMode::Frozen, MaskingMode::UniformRandom, NegativeScope::Global, 0.0, false},
        {"+modality_masking", TargetMode::Frozen, MaskingMode::ModalityAware, NegativeScope::Global, 0.0, false},
        {"+modality_patch_disc", TargetMode::Frozen, MaskingMode::ModalityAware, NegativeScope::SameBandset, 0.0,
         false},
        {"+contrastive", TargetMode::Frozen, MaskingMode::ModalityAware, NegativeScope::SameBandset, 0.1, false},
        {"+maps", TargetMode::Frozen, MaskingMode::ModalityAware, NegativeScope::SameBandset, 0.1, true},
    };
  }
  if (name == "table5") {
    const AblationSpec final_recipe;
    std::vector<AblationSpec> arms;
    AblationSpec a = final_recipe;
    a.name = "mae";
    a.target_mode = TargetMode::Pixel;
    arms.push_back(a);
    a = final_recipe;
    a.name = "no_maps";
    a.use_maps = false;
    arms.push_back(a);
    a = final_recipe;
    a.name = "random_masking";
    a.masking_mode = MaskingMode::UniformRandom;
    arms.push_back(a);
    a = final_recipe;
    a.name = "no_inst_contrastive";
    a.lambda_inst = 0.0;
    arms.push_back(a);
    a = final_recipe;
    a.name = "patch_disc";
    a.negative_scope = NegativeScope::Global;
    arms.push_back(a);
    arms.push_back(final_recipe);
    return arms;
  }
  throw std::invalid_argument("unknown ablation matrix '" + name + "' (expected table4 or table5)");
}

void apply_ablation(const AblationSpec& spec, PretrainConfig& c) {
  c.target_mode = spec.target_mode;
  c.masking.mode = spec.masking_mode;
  c.loss.negative_scope = spec.negative_scope;
  c.loss.lambda_inst = spec.lambda_inst;
  c.use_maps = spec.use_maps;
}

AblationSpec ablation_of(const PretrainConfig& c, std::string name) {
  return {std::move(name), c.target_mode, c.masking.mode, c.loss.negative_scope, c.loss.lambda_inst, c.use_maps};
}

std::vector<std::string> check(const PretrainConfig& c) {
  std::vector<std::string> e = check(c.optim);
  auto wrap = [&e](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& ex) {
      e.push_back(std::string(section) + ": " + ex.what());
    }
  };
  wrap("tokenizer", [&] { tok::validate(c.tokenizer); });
  wrap("masking", [&] { mask::validate(c.masking); });
  wrap("model", [&] { model::validate(c.model); });
  wrap("loss", [&] { obj::validate(c.loss); });
  if (c.tokenizer.model_dim != c.model.encoder.dim) e.push_back("tokenizer.model_dim must equal model.dim");
  if (c.tokenizer.base_patch_size != c.model.base_patch_size) {
    e.push_back("tokenizer.base_patch_size must equal model.base_patch_size");
  }
  if (c.loss.lambda_inst > 0.0 && c.optim.micro_batch_size < 2) {
    e.push_back("instance contrastive loss needs optim.micro_batch_size >= 2");
  }
  if (c.target_mode == model::TargetMode::Ema && c.use_maps) {
    e.push_back("ema targets come from the encoder, which never sees maps: set ablation.use_maps = false");
  }
  if (c.probe_samples < 1) e.push_back("probe_samples must be >= 1");
  if (!(c.collapse_fraction > 0.0 && c.collapse_fraction < 1.0)) e.push_back("collapse_fraction must be in (0, 1)");
  if (c.threads < 1) e.push_back("threads must be >= 1");
  return e;
}

data::Registry effective_registry(const PretrainConfig& c) {
  return c.use_maps ? c.registry : c.registry.without_maps();
}

TrainState init_state(const PretrainConfig& c) {
  TrainState s;
  s.seed = c.seed;
  s.params = model::init_params(c.model, effective_registry(c), c.seed, c.target_mode);
  return s;
}

// ---------------------------------------------------------------------------

namespace {

bool has_observation_tokens(const data::Sample& s, const tok::SampleDraw& d, const data::Registry& reg) {
  const int T = static_cast<int>(s.timestamps.size());
  const int lo = d.t_count > 0 ? d.t_begin : 0;
  const int hi = d.t_count > 0 ? d.t_begin + d.t_count : T;
  for (const auto& info : reg.bandsets()) {
    if (info.kind == ModalityKind::Map) continue;
    const data::BandsetRaster* r = s.find(info.spec.id);
    if (!r) continue;
    const int a = info.temporal == data::Temporality::Static ? 0 : lo;
    const int b = info.temporal == data::Temporality::Static ? 1 : std::min(hi, r->timesteps);
    for (int t = a; t < b; ++t) {
      if (r->present[t]) return true;
    }
  }
  return false;
}

// Redraws the temporal window when it happens to miss every present
// observation timestep, falling back to the full series.
tok::SampleDraw usable_layout(const data::Sample& s, const tok::TokenizerConfig& cfg, const data::Registry& reg,
                              Rng& rng) {
  for (int attempt = 0; attempt < 8; ++attempt) {
    tok::SampleDraw d = tok::draw_layout(s, cfg, rng);
    if (has_observation_tokens(s, d, reg)) return d;
  }
  tok::SampleDraw d = tok::draw_layout(s, cfg, rng);
  d.t_begin = 0;
  d.t_count = 0;
  return d;
}

struct ViewOutput {
  ad::Var loss;
  ad::Var pooled;
};

ViewOutput run_view(ad::Graph& g, const model::ParamVars& pv, const TrainState& state, const PretrainConfig& c,
                    const data::Registry& reg, const tok::TokenBatch& batch, const mask::MaskPlan& plan) {
  const mask::MaskedBatch mb = mask::apply_mask(batch, plan);
  ad::Var x = model::embed_tokens(g, pv, batch, mb.encoder_rows, reg);
  ad::Var latents = model::encoder_forward(g, pv, c.model, x, mb.encoder_offsets);
  ad::Var queries = model::decoder_queries(g, pv, batch, mb.target_rows);
  ad::Var preds = model::decoder_forward(g, pv, c.model, latents, mb.encoder_offsets, queries, mb.target_offsets);
  ViewOutput out;
  out.pooled = model::pool_instance(latents, mb.encoder_offsets);
  switch (c.target_mode) {
    case model::TargetMode::Pixel:
      out.loss = obj::pixel_reconstruction_loss(g, pv, preds, batch, mb.target_rows, reg, c.loss.smooth_l1_beta);
      break;
    case model::TargetMode::Frozen:
    case model::TargetMode::Ema: {
      ad::Array targets = c.target_mode == model::TargetMode::Frozen
                              ? obj::project_targets(state.params, batch, mb.target_rows, reg)
                              : obj::ema_targets(state.params, c.model, batch, mb.target_rows, reg);
      const auto metas = mb.target_metas(batch);
      const auto keys = obj::scope_keys(metas, c.loss.negative_scope, c.loss.scope_unit);
      out.loss = obj::patch_discrimination_loss(preds, g.constant(std::move(targets)), keys, c.loss.tau_patch);
      break;
    }
  }
  return out;
}

}  // namespace

MicroBatchResult compute_micro_batch(const TrainState& state, const PretrainConfig& c,
                                     std::span<const data::Sample> samples, std::uint64_t stream) {
  if (samples.empty()) throw std::invalid_argument("compute_micro_batch: empty micro-batch");
  const data::Registry reg = effective_registry(c);
  std::vector<tok::SampleDraw> draws;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng rng = make_rng(stream, "tokenizer", {i});
    draws.push_back(usable_layout(samples[i], c.tokenizer, reg, rng));
  }
  const tok::TokenBatch batch = tok::assemble_tokens(samples, draws, reg, c.tokenizer, c.use_maps);
  const mask::MaskPlan plan0 = mask::sample_mask_plan(batch, reg, c.masking, derive_seed(stream, "mask", {0}), 0);
  const mask::MaskPlan plan1 = mask::sample_mask_plan(batch, reg, c.masking, derive_seed(stream, "mask", {1}), 1);

  ad::Graph g;
  model::ParamVars pv(g, state.params.learned, true);
  const ViewOutput v0 = run_view(g, pv, state, c, reg, batch, plan0);
  const ViewOutput v1 = run_view(g, pv, state, c, reg, batch, plan1);
  std::optional<ad::Var> inst;
  if (c.loss.lambda_inst > 0.0) inst = obj::instance_contrastive_loss(v0.pooled, v1.pooled, c.loss.tau_inst);
  const obj::CombinedLoss loss = obj::combined_loss(v0.loss, v1.loss, inst ? &*inst : nullptr, c.loss.lambda_inst);

  MicroBatchResult r;
  r.loss = loss.breakdown;
  r.finite = std::isfinite(loss.breakdown.total);
  if (!r.finite) return r;
  g.backward(loss.total);
  for (const auto& [name, var] : pv.vars()) {
    const ad::Array* gr = g.grad(var);
    r.grads[name] = gr && !gr->data.empty() ? *gr : ad::Array(var.shape(), 0.0);
  }
  return r;
}

ParamMap mean_gradients(std::span<const MicroBatchResult> parts) {
  if (parts.empty()) throw std::invalid_argument("mean_gradients: nothing to accumulate");
  ParamMap acc = parts[0].grads;
  for (std::size_t k = 1; k < parts.size(); ++k) {
    for (auto& [name, a] : acc) {
      const ad::Array& g = parts[k].grads.at(name);
      for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += g.data[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (auto& [_, a] : acc) {
    for (double& v : a.data) v *= inv;
  }
  return acc;
}

double global_norm(const ParamMap& grads) {
  double s = 0.0;
  for (const auto& [_, a] : grads) {
    for (double v : a.data) s += v * v;
  }
  return std::sqrt(s);
}

std::string to_json_line(const StepMetrics& m) {
  json j;
  j["step"] = m.step;
  j["lr"] = m.lr;
  j["loss_total"] = m.loss_total;
  j["loss_patch_v0"] = m.loss_patch_v0;
  j["loss_patch_v1"] = m.loss_patch_v1;
  j["loss_inst"] = m.loss_inst;
  j["target_variance"] = m.target_variance;
  j["grad_norm"] = m.grad_norm;
  return j.dump();
}

bool apply_update(TrainState& state, const PretrainConfig& c, std::span<const MicroBatchResult> parts,
                  StepMetrics* metrics) {
  StepMetrics m;
  m.step = state.step;
  for (const auto& p : parts) {
    m.loss_total += p.loss.total;
    m.loss_patch_v0 += p.loss.patch_v0;
    m.loss_patch_v1 += p.loss.patch_v1;
    m.loss_inst += p.loss.inst;
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  m.loss_total *= inv;
  m.loss_patch_v0 *= inv;
  m.loss_patch_v1 *= inv;
  m.loss_inst *= inv;
  m.lr = lr_at(std::min(state.step + 1, c.optim.total_steps), c.optim);
  const bool finite = std::all_of(parts.begin(), parts.end(), [](const auto& p) { return p.finite; });
  bool applied = false;
  if (finite) {
    const ParamMap grads = mean_gradients(parts);
    m.grad_norm = global_norm(grads);
    applied = adamw_step(state.params.learned, state.adam, grads, m.lr, c.optim);
  } else {
    m.grad_norm = std::numeric_limits<double>::quiet_NaN();
  }
  if (applied) {
    if (c.target_mode == model::TargetMode::Ema) obj::ema_update(state.params, c.loss.ema_momentum);
    state.step += 1;
  }
  if (metrics) *metrics = m;
  return applied;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t n, int batch_size) {
  if (n == 0) throw std::invalid_argument("batch_indices: empty dataset");
  const auto want = static_cast<std::size_t>(batch_size);
  Rng rng = make_rng(seed, "batch", {step});
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::vector<std::size_t> out;
  // Without replacement inside a pass over the data; wraps for tiny datasets.
  while (out.size() < want) {
    const std::size_t take = std::min(want - out.size(), n);
    for (std::size_t i = 0; i < take; ++i) {
      const auto j = i + static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(n - i) - 1));
      std::swap(idx[i], idx[j]);
      out.push_back(idx[i]);
    }
  }
  return out;
}

StepMetrics pretrain_step(TrainState& state, const PretrainConfig& c, std::span<const data::Sample> batch) {
  if (batch.size() != static_cast<std::size_t>(c.optim.batch_size)) {
    throw std::invalid_argument("pretrain_step: expected " + std::to_string(c.optim.batch_size) + " samples, got " +
                                std::to_string(batch.size()));
  }
  const auto mb = static_cast<std::size_t>(c.optim.micro_batch_size);
  const std::size_t n_micro = batch.size() / mb;
  std::vector<MicroBatchResult> parts(n_micro);
  auto run = [&](std::size_t j) {
    const std::uint64_t stream = derive_seed(state.seed, "micro", {state.step, j});
    return compute_micro_batch(state, c, batch.subspan(j * mb, mb), stream);
  };
  try {
    if (c.threads > 1 && n_micro > 1) {
      // Results are collected in micro-batch order, so the reduction is
      // identical to the serial path.
      for (std::size_t lo = 0; lo < n_micro; lo += static_cast<std::size_t>(c.threads)) {
        const std::size_t hi = std::min(n_micro, lo + static_cast<std::size_t>(c.threads));
        std::vector<std::future<MicroBatchResult>> fs;
        for (std::size_t j = lo; j < hi; ++j) fs.push_back(std::async(std::launch::async, run, j));
        for (std::size_t j = lo; j < hi; ++j) parts[j] = fs[j - lo].get();
      }
    } else {
      for (std::size_t j = 0; j < n_micro; ++j) parts[j] = run(j);
    }
  } catch (const std::exception& e) {
    throw TrainingError("step " + std::to_string(state.step) + ": " + e.what());
  }
  StepMetrics m;
  if (!apply_update(state, c, parts, &m)) {
    throw TrainingError("step " + std::to_string(m.step) + ": non-finite loss or gradient (loss_total=" +
                        std::to_string(m.loss_total) + "); update aborted");
  }
  return m;
}

// ---------------------------------------------------------------------------

ProbeBatch make_probe(std::span<const data::Sample> samples, const PretrainConfig& c) {
  if (samples.empty()) throw std::invalid_argument("make_probe: no samples");
  const data::Registry reg = effective_registry(c);
  const std::size_t n = std::min(samples.size(), static_cast<std::size_t>(c.probe_samples));
  std::vector<tok::SampleDraw> draws;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(c.seed, "probe", {i});
    draws.push_back(usable_layout(samples[i], c.tokenizer, reg, rng));
  }
  ProbeBatch p;
  p.batch = tok::assemble_tokens(samples.first(n), draws, reg, c.tokenizer, false);
  p.rows.resize(p.batch.size());
  for (std::size_t i = 0; i < p.rows.size(); ++i) p.rows[i] = i;
  return p;
}

double probe_target_variance(const ProbeBatch& probe, const model::ModelParams& params, const PretrainConfig& c) {
  const data::Registry reg = effective_registry(c);
  if (c.target_mode == model::TargetMode::Ema) {
    return obj::target_variance(obj::ema_targets(params, c.model, probe.batch, probe.rows, reg));
  }
  return obj::target_variance(obj::project_targets(params, probe.batch, probe.rows, reg));
}

model::Checkpoint make_checkpoint(const TrainState& state, const data::NormStats& stats,
                                  const std::string& config_text) {
  model::Checkpoint ck;
  ck.config_text = config_text;
  ck.step = state.step;
  ck.seed = state.seed;
  model::store_params(ck, state.params);
  for (const auto& [n, a] : state.adam.m) ck.arrays["adam_m/" + n] = a;
  for (const auto& [n, a] : state.adam.v) ck.arrays["adam_v/" + n] = a;
  ck.arrays["adam_t"] = ad::Array::scalar(static_cast<double>(state.adam.t));
  ck.arrays["norm_provenance"] = ad::Array::scalar(stats.provenance == data::StatsProvenance::Pretraining ? 0.0 : 1.0);
  for (const auto& [id, bands] : stats.bands) {
    ad::Array mean(ad::Shape{bands.size()});
    ad::Array sd(ad::Shape{bands.size()});
    for (std::size_t i = 0; i < bands.size(); ++i) {
      mean.data[i] = bands[i].mean;
      sd.data[i] = bands[i].std;
    }
    ck.arrays["norm/" + id + "/mean"] = std::move(mean);
    ck.arrays["norm/" + id + "/std"] = std::move(sd);
  }
  return ck;
}

TrainState restore_state(const model::Checkpoint& ck) {
  TrainState s;
  s.step = ck.step;
  s.seed = ck.seed;
  s.params = model::load_params(ck);
  for (const auto& [n, a] : ck.arrays) {
    if (n.starts_with("adam_m/")) s.adam.m[n.substr(7)] = a;
    else if (n.starts_with("adam_v/")) s.adam.v[n.substr(7)] = a;
  }
  if (auto it = ck.arrays.find("adam_t"); it != ck.arrays.end()) s.adam.t = static_cast<std::uint64_t>(it->second.item());
  return s;
}

data::NormStats restore_stats(const model::Checkpoint& ck) {
  data::NormStats st;
  if (auto it = ck.arrays.find("norm_provenance"); it != ck.arrays.end() && it->second.item() != 0.0) {
    st.provenance = data::StatsProvenance::EvalSet;
  }
  for (const auto& [n, a] : ck.arrays) {
    if (!n.starts_with("norm/") || !n.ends_with("/mean")) continue;
    const std::string id = n.substr(5, n.size() - 5 - 5);
    const ad::Array& sd = ck.arrays.at("norm/" + id + "/std");
    auto& bands = st.bands[id];
    for (std::size_t i = 0; i < a.size(); ++i) bands.push_back({a.data[i], sd.data[i], sd.data[i] <= data::NormStats::kMinStd});
  }
  return st;
}

namespace {

std::string ckpt_name(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%06llu.lmlc", static_cast<unsigned long long>(step));
  return buf;
}

}  // namespace

PretrainResult pretrain(const PretrainConfig& c, std::span<const data::Sample> raw_samples,
                        const PretrainOptions& options) {
  if (auto errors = check(c); !errors.empty()) {
    std::string msg = "invalid pretraining config:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
  if (raw_samples.empty()) throw std::invalid_argument("pretrain: no training samples");
  const data::Registry reg = effective_registry(c);

  PretrainResult res;
  res.stats = data::compute_stats(raw_samples, reg, data::StatsProvenance::Pretraining);
  const std::vector<data::Sample> samples = data::normalize(raw_samples, res.stats, reg);
  const ProbeBatch probe = make_probe(samples, c);

  if (options.resume_from) {
    const model::Checkpoint ck = model::read_checkpoint(*options.resume_from);
    res.state = restore_state(ck);
    if (res.state.seed != c.seed) throw TrainingError("resume: checkpoint seed differs from the run seed");
  } else {
    res.state = init_state(c);
  }
  res.frozen_hash = model::hash_arrays(res.state.params.frozen);
  // The collapse baseline is always the variance of a fresh initialization.
  res.initial_target_variance = probe_target_variance(probe, init_state(c).params, c);

  const bool write = !options.out_dir.empty();
  std::ofstream metrics_file;
  std::ofstream ckpt_log;
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    const auto mode = options.resume_from ? std::ios::app : std::ios::trunc;
    metrics_file.open(options.out_dir / "metrics.jsonl", std::ios::out | mode);
    ckpt_log.open(options.out_dir / "checkpoints.jsonl", std::ios::out | mode);
    if (!metrics_file || !ckpt_log) throw TrainingError("cannot write metrics under " + options.out_dir.string());
  }

  auto save = [&](const TrainState& s) {
    if (model::hash_arrays(s.params.frozen) != res.frozen_hash) {
      throw TrainingError("frozen target projections changed before step " + std::to_string(s.step));
    }
    CheckpointRecord rec;
    rec.step = s.step;
    rec.frozen_hash = res.frozen_hash;
    rec.probe_variance = probe_target_variance(probe, s.params, c);
    if (write) {
      rec.path = options.out_dir / ckpt_name(s.step);
      model::write_checkpoint(rec.path, make_checkpoint(s, res.stats, options.config_text));
      json j;
      j["step"] = rec.step;
      j["file"] = rec.path.filename().string();
      char hex[17];
      std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(rec.frozen_hash));
      j["frozen_hash"] = hex;
      j["probe_target_variance"] = rec.probe_variance;
      ckpt_log << j.dump() << "\n" << std::flush;
    }
    res.checkpoints.push_back(rec);
  };

  if (!options.resume_from) save(res.state);

  while (res.state.step < c.optim.total_steps) {
    const auto idx = batch_indices(c.seed, res.state.step, samples.size(), c.optim.batch_size);
    std::vector<data::Sample> batch;
    batch.reserve(idx.size());
    for (std::size_t i : idx) batch.push_back(samples[i]);
    StepMetrics m;
    try {
      m = pretrain_step(res.state, c, batch);
    } catch (const TrainingError& e) {
      res.halted = true;
      res.halt_reason = e.what();
      break;
    }
    m.target_variance = probe_target_variance(probe, res.state.params, c);
    if (!res.collapse_detected && m.target_variance < c.collapse_fraction * res.initial_target_variance) {
      res.collapse_detected = true;
      res.collapse_step = m.step;
    }
    res.history.push_back(m);
    if (write) metrics_file << to_json_line(m) << "\n" << std::flush;
    if (options.on_step) options.on_step(m);
    const bool periodic = c.checkpoint_every > 0 && res.state.step % c.checkpoint_every == 0;
    if (periodic || res.state.step == c.optim.total_steps) save(res.state);
  }
  if (res.halted && write && (res.checkpoints.empty() || res.checkpoints.back().step != res.state.step)) {
    save(res.state);  // parameters are still the last good ones: the failing update was not applied
  }
  return res;
}

}  // namespace lmlite::train
