// SPDX-License-Identifier: Apache-2.0
#include "lmlite/model.hpp"

#include <algorithm>
#include <cmath>

#include "lmlite/rng.hpp"

namespace lmlite::model {

using data::ModalityKind;

std::string to_string(TargetMode m) {
  switch (m) {
    case TargetMode::Frozen: return "frozen";
    case TargetMode::Ema: return "ema";
    case TargetMode::Pixel: return "pixel";
  }
  return "?";
}

TargetMode target_mode_from_string(const std::string& s) {
  if (s == "frozen") return TargetMode::Frozen;
  if (s == "ema") return TargetMode::Ema;
  if (s == "pixel") return TargetMode::Pixel;
  throw std::invalid_argument("unknown target mode '" + s + "' (expected frozen, ema or pixel)");
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "desk") {
    c.encoder = {2, 64, 4, 4};
    c.decoder.depth = 2;
  } else if (name == "nano") {
    c.encoder = {4, 128, 8, 4};
    c.decoder.depth = 4;
  } else if (name == "tiny") {
    c.encoder = {12, 192, 3, 4};
    c.decoder.depth = 4;
  } else if (name == "base") {
    c.encoder = {12, 768, 12, 4};
    c.decoder.depth = 4;
  } else if (name == "large") {
    c.encoder = {24, 1024, 16, 4};
    c.decoder.depth = 4;
  } else {
    throw std::invalid_argument("unknown model preset '" + name + "'");
  }
  return c;
}

void validate(const ModelConfig& c) {
  const auto& e = c.encoder;
  if (e.depth < 1 || e.dim < 4 || e.heads < 1 || e.mlp_ratio < 1) {
    throw std::invalid_argument("model: depth, dim, heads and mlp_ratio must be positive (dim >= 4)");
  }
  if (e.dim % e.heads != 0) throw std::invalid_argument("model: dim must be divisible by heads");
  if (e.dim % 4 != 0) throw std::invalid_argument("model: dim must be divisible by 4 for 2-D sincos encodings");
  if (c.decoder.depth < 1) throw std::invalid_argument("model: decoder depth must be >= 1");
  if (c.base_patch_size < 1) throw std::invalid_argument("model: base_patch_size must be >= 1");
}

std::size_t encoder_block_param_count(int dim, int mlp_ratio) {
  const std::size_t d = static_cast<std::size_t>(dim);
  const std::size_t h = d * static_cast<std::size_t>(mlp_ratio);
  return 4 * d              // two layer norms
         + 3 * d * d + 3 * d  // qkv
         + d * d + d          // attention output
         + d * h + h          // fc1
         + h * d + d;         // fc2
}

std::size_t encoder_param_count(const EncoderConfig& c) {
  return static_cast<std::size_t>(c.depth) * encoder_block_param_count(c.dim, c.mlp_ratio) +
         2 * static_cast<std::size_t>(c.dim);
}

std::size_t decoder_param_count(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.encoder.dim);
  const std::size_t h = d * static_cast<std::size_t>(c.encoder.mlp_ratio);
  std::size_t block = 2 * d                             // cross-attention norm
                      + d * d + d + 2 * d * d + 2 * d   // cross q, kv
                      + d * d + d                       // cross output
                      + 2 * d + d * h + h + h * d + d;  // mlp norm + mlp
  if (c.decoder.query_self_attention) block += 2 * d + 3 * d * d + 3 * d + d * d + d;
  return static_cast<std::size_t>(c.decoder.depth) * block + 2 * d + d * d + d;
}

std::size_t learned_param_count(const ModelConfig& c, const data::Registry& registry, TargetMode mode) {
  const std::size_t d = static_cast<std::size_t>(c.encoder.dim);
  const std::size_t p2 = static_cast<std::size_t>(c.base_patch_size * c.base_patch_size);
  std::size_t n = encoder_param_count(c.encoder) + decoder_param_count(c) + d  // mask token
                  + registry.num_bandsets() * d;                              // modality embeddings
  for (const auto& b : registry.bandsets()) {
    const std::size_t pix = p2 * static_cast<std::size_t>(b.channels);
    if (b.kind == ModalityKind::Observation) n += pix * d + d;
    if (mode == TargetMode::Pixel) n += d * pix + pix;
  }
  return n;
}

std::size_t ModelParams::learned_count() const {
  std::size_t n = 0;
  for (const auto& [_, a] : learned) n += a.size();
  return n;
}

const Array& ModelParams::get(const std::string& name) const {
  if (auto it = learned.find(name); it != learned.end()) return it->second;
  if (auto it = frozen.find(name); it != frozen.end()) return it->second;
  throw std::out_of_range("no parameter named '" + name + "'");
}

std::string frozen_weight_name(const std::string& bandset_id) { return "target/" + bandset_id + "/w"; }
std::string frozen_bias_name(const std::string& bandset_id) { return "target/" + bandset_id + "/b"; }

namespace {

using ad::Shape;

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

struct Init {
  Rng rng;
  std::map<std::string, Array>* out;

  void xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Array w(Shape{fan_in, fan_out});
    for (double& v : w.data) v = (2.0 * uniform01(rng) - 1.0) * a;
    (*out)[name + "/w"] = std::move(w);
    (*out)[name + "/b"] = Array(Shape{fan_out}, 0.0);
  }
  void norm(const std::string& name, std::size_t d) {
    (*out)[name + "/g"] = Array(Shape{d}, 1.0);
    (*out)[name + "/b"] = Array(Shape{d}, 0.0);
  }
  void normal(const std::string& name, Shape shape, double stddev) {
    Array a(std::move(shape));
    for (double& v : a.data) v = stddev * normal01(rng);
    (*out)[name] = std::move(a);
  }
};

}  // namespace

ModelParams init_params(const ModelConfig& config, const data::Registry& registry, std::uint64_t seed,
                        TargetMode mode) {
  validate(config);
  const std::size_t d = sz(config.encoder.dim);
  const std::size_t h = d * sz(config.encoder.mlp_ratio);
  const std::size_t p2 = sz(config.base_patch_size * config.base_patch_size);
  ModelParams P;

  Init L{make_rng(seed, "init"), &P.learned};
  for (const auto& b : registry.bandsets()) {
    if (b.kind == ModalityKind::Observation) L.xavier("proj/" + b.spec.id, p2 * sz(b.channels), d);
  }
  L.normal("modality_embed", Shape{registry.num_bandsets(), d}, 0.02);
  L.normal("mask_token", Shape{d}, 0.02);
  for (int l = 0; l < config.encoder.depth; ++l) {
    const std::string pre = "enc/" + std::to_string(l) + "/";
    L.norm(pre + "ln1", d);
    L.xavier(pre + "attn/qkv", d, 3 * d);
    L.xavier(pre + "attn/out", d, d);
    L.norm(pre + "ln2", d);
    L.xavier(pre + "mlp/fc1", d, h);
    L.xavier(pre + "mlp/fc2", h, d);
  }
  L.norm("enc/norm", d);
  for (int l = 0; l < config.decoder.depth; ++l) {
    const std::string pre = "dec/" + std::to_string(l) + "/";
    if (config.decoder.query_self_attention) {
      L.norm(pre + "ln_self", d);
      L.xavier(pre + "self/qkv", d, 3 * d);
      L.xavier(pre + "self/out", d, d);
    }
    L.norm(pre + "ln_cross", d);
    L.xavier(pre + "cross/q", d, d);
    L.xavier(pre + "cross/kv", d, 2 * d);
    L.xavier(pre + "cross/out", d, d);
    L.norm(pre + "ln2", d);
    L.xavier(pre + "mlp/fc1", d, h);
    L.xavier(pre + "mlp/fc2", h, d);
  }
  L.norm("dec/norm", d);
  L.xavier("dec/out", d, d);
  if (mode == TargetMode::Pixel) {
    for (const auto& b : registry.bandsets()) L.xavier("pixel_head/" + b.spec.id, d, p2 * sz(b.channels));
  }

  Rng frng = make_rng(seed, "frozen_targets");
  for (const auto& b : registry.bandsets()) {
    const std::size_t pix = p2 * sz(b.channels);
    Array w(Shape{pix, d});
    const double sd = 1.0 / std::sqrt(static_cast<double>(pix));
    for (double& v : w.data) v = sd * normal01(frng);
    P.frozen[frozen_weight_name(b.spec.id)] = std::move(w);
    P.frozen[frozen_bias_name(b.spec.id)] = Array(Shape{d}, 0.0);
  }

  if (mode == TargetMode::Ema) {
    for (const auto& [name, a] : P.learned) {
      if (name.starts_with("proj/") || name.starts_with("enc/") || name == "modality_embed") P.ema[name] = a;
    }
  }
  return P;
}

std::uint64_t hash_arrays(const std::map<std::string, Array>& arrays) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, a] : arrays) {
    h = fnv1a(name, h);
    for (std::size_t e : a.shape) {
      const auto v = static_cast<std::uint64_t>(e);
      h = fnv1a(std::span(reinterpret_cast<const unsigned char*>(&v), sizeof v), h);
    }
    h = fnv1a(std::span(reinterpret_cast<const unsigned char*>(a.data.data()), a.data.size() * sizeof(double)), h);
  }
  return h;
}

ParamVars::ParamVars(Graph& g, const std::map<std::string, Array>& arrays, bool requires_grad) {
  for (const auto& [name, a] : arrays) vars_.emplace(name, g.leaf(a, requires_grad, name));
}

Var ParamVars::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("parameter '" + name + "' is not registered");
  return it->second;
}

// ---------------------------------------------------------------------------

namespace {

Var linear(const ParamVars& p, const std::string& name, Var x) { return ad::add(ad::matmul(x, p[name + "/w"]), p[name + "/b"]); }

Var norm(const ParamVars& p, const std::string& name, Var x) {
  return ad::layer_norm(x, p[name + "/g"], p[name + "/b"]);
}

// [n, d] -> [h, n, d/h]
Var split_heads(Var x, std::size_t heads) {
  const std::size_t n = x.shape()[0];
  const std::size_t d = x.shape()[1];
  return ad::permute(ad::reshape(x, {n, heads, d / heads}), {1, 0, 2});
}

Var merge_heads(Var x) {
  const std::size_t h = x.shape()[0];
  const std::size_t n = x.shape()[1];
  const std::size_t dh = x.shape()[2];
  return ad::reshape(ad::permute(x, {1, 0, 2}), {n, h * dh});
}

void check_offsets(std::span<const std::size_t> offsets, std::size_t rows, const char* what) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != rows) {
    throw std::invalid_argument(std::string(what) + ": offsets do not partition " + std::to_string(rows) + " rows");
  }
  for (std::size_t i = 1; i < offsets.size(); ++i) {
    if (offsets[i] < offsets[i - 1]) throw std::invalid_argument(std::string(what) + ": offsets not monotone");
  }
}

// Self-attention within each sample; rows of h are grouped by offsets.
Var self_attention(const ParamVars& p, const std::string& name, Var h, std::span<const std::size_t> offsets,
                   std::size_t heads) {
  const std::size_t d = h.shape()[1];
  Var qkv = linear(p, name + "/qkv", h);
  std::vector<Var> parts;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s + 1] == offsets[s]) continue;
    Var rows = ad::slice(qkv, 0, offsets[s], offsets[s + 1]);
    Var q = split_heads(ad::slice(rows, 1, 0, d), heads);
    Var k = split_heads(ad::slice(rows, 1, d, 2 * d), heads);
    Var v = split_heads(ad::slice(rows, 1, 2 * d, 3 * d), heads);
    parts.push_back(merge_heads(ad::attention(q, k, v)));
  }
  return linear(p, name + "/out", ad::concat(parts, 0));
}

Var cross_attention(const ParamVars& p, const std::string& name, Var h, std::span<const std::size_t> q_offsets,
                    Var memory, std::span<const std::size_t> m_offsets, std::size_t heads) {
  const std::size_t d = h.shape()[1];
  Var q_all = linear(p, name + "/q", h);
  Var kv_all = linear(p, name + "/kv", memory);
  std::vector<Var> parts;
  for (std::size_t s = 0; s + 1 < q_offsets.size(); ++s) {
    if (q_offsets[s + 1] == q_offsets[s]) continue;
    if (m_offsets[s + 1] == m_offsets[s]) {
      throw std::invalid_argument("decoder_forward: sample " + std::to_string(s) +
                                  " has target slots but no latents to attend to");
    }
    Var q = split_heads(ad::slice(q_all, 0, q_offsets[s], q_offsets[s + 1]), heads);
    Var kv = ad::slice(kv_all, 0, m_offsets[s], m_offsets[s + 1]);
    Var k = split_heads(ad::slice(kv, 1, 0, d), heads);
    Var v = split_heads(ad::slice(kv, 1, d, 2 * d), heads);
    parts.push_back(merge_heads(ad::attention(q, k, v)));
  }
  return linear(p, name + "/out", ad::concat(parts, 0));
}

Var mlp(const ParamVars& p, const std::string& name, Var h) {
  return linear(p, name + "/fc2", ad::gelu(linear(p, name + "/fc1", h)));
}

Array rows_of(const Array& a, std::span<const std::size_t> rows) {
  const std::size_t d = a.dim(1);
  Array out(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(a.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

}  // namespace

Var embed_tokens(Graph& g, const ParamVars& p, const tok::TokenBatch& batch, std::span<const std::size_t> rows,
                 const data::Registry& registry) {
  if (rows.empty()) throw std::invalid_argument("embed_tokens: no rows");
  // Group rows by bandset so each projection is one matmul.
  std::map<std::uint32_t, std::vector<std::size_t>> groups;  // bandset -> positions in `rows`
  for (std::size_t i = 0; i < rows.size(); ++i) groups[batch.metas.at(rows[i]).bandset].push_back(i);

  std::vector<Var> blocks;
  std::vector<std::size_t> order;  // order[k] = position in `rows` of the k-th grouped row
  for (const auto& [b, pos] : groups) {
    const auto& info = registry.bandset(b);
    const std::string name = "proj/" + info.spec.id;
    if (!p.contains(name + "/w")) {
      throw std::invalid_argument("embed_tokens: no learned projection for bandset '" + info.spec.id + "'" +
                                  (info.kind == ModalityKind::Map ? " (map tokens are decode-only)" : ""));
    }
    const std::size_t pix = batch.raw_patch(rows[pos[0]]).size();
    Array patches(ad::Shape{pos.size(), pix});
    for (std::size_t k = 0; k < pos.size(); ++k) {
      const auto raw = batch.raw_patch(rows[pos[k]]);
      std::copy(raw.begin(), raw.end(), patches.data.begin() + static_cast<std::ptrdiff_t>(k * pix));
      order.push_back(pos[k]);
    }
    blocks.push_back(tok::patch_project(g.constant(std::move(patches)), p[name + "/w"], p[name + "/b"]));
  }
  Var grouped = blocks.size() == 1 ? blocks[0] : ad::concat(blocks, 0);
  std::vector<std::size_t> inverse(rows.size());
  for (std::size_t k = 0; k < order.size(); ++k) inverse[order[k]] = k;
  bool identity = true;
  for (std::size_t i = 0; i < inverse.size(); ++i) identity = identity && inverse[i] == i;
  Var proj = identity ? grouped : ad::gather_rows(grouped, inverse);

  std::vector<std::size_t> bandsets(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) bandsets[i] = batch.metas[rows[i]].bandset;
  Var modality = ad::gather_rows(p["modality_embed"], bandsets);
  return ad::add(ad::add(proj, modality), g.constant(rows_of(batch.encodings, rows)));
}

Var decoder_queries(Graph& g, const ParamVars& p, const tok::TokenBatch& batch, std::span<const std::size_t> rows) {
  if (rows.empty()) throw std::invalid_argument("decoder_queries: no target slots");
  std::vector<std::size_t> bandsets(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) bandsets[i] = batch.metas.at(rows[i]).bandset;
  Var base = ad::add(g.constant(rows_of(batch.encodings, rows)), p["mask_token"]);
  return ad::add(base, ad::gather_rows(p["modality_embed"], bandsets));
}

Var encoder_forward(Graph& /*g*/, const ParamVars& p, const ModelConfig& config, Var x,
                    std::span<const std::size_t> offsets) {
  if (x.shape().size() != 2 || x.shape()[0] == 0) {
    throw std::invalid_argument("encoder_forward: expected non-empty [N, dim] input");
  }
  check_offsets(offsets, x.shape()[0], "encoder_forward");
  const auto heads = sz(config.encoder.heads);
  for (int l = 0; l < config.encoder.depth; ++l) {
    const std::string pre = "enc/" + std::to_string(l) + "/";
    x = ad::add(x, self_attention(p, pre + "attn", norm(p, pre + "ln1", x), offsets, heads));
    x = ad::add(x, mlp(p, pre + "mlp", norm(p, pre + "ln2", x)));
  }
  return norm(p, "enc/norm", x);
}

Var decoder_forward(Graph& /*g*/, const ParamVars& p, const ModelConfig& config, Var latents,
                    std::span<const std::size_t> latent_offsets, Var queries,
                    std::span<const std::size_t> query_offsets) {
  if (latents.shape().size() != 2 || latents.shape()[0] == 0) {
    throw std::invalid_argument("decoder_forward: no latents to condition on");
  }
  if (queries.shape().size() != 2 || queries.shape()[0] == 0) {
    throw std::invalid_argument("decoder_forward: no target slots");
  }
  check_offsets(latent_offsets, latents.shape()[0], "decoder_forward(latents)");
  check_offsets(query_offsets, queries.shape()[0], "decoder_forward(queries)");
  if (latent_offsets.size() != query_offsets.size()) {
    throw std::invalid_argument("decoder_forward: latents and queries cover different sample counts");
  }
  const auto heads = sz(config.encoder.heads);
  Var x = queries;
  for (int l = 0; l < config.decoder.depth; ++l) {
    const std::string pre = "dec/" + std::to_string(l) + "/";
    if (config.decoder.query_self_attention) {
      x = ad::add(x, self_attention(p, pre + "self", norm(p, pre + "ln_self", x), query_offsets, heads));
    }
    x = ad::add(x, cross_attention(p, pre + "cross", norm(p, pre + "ln_cross", x), query_offsets, latents,
                                   latent_offsets, heads));
    x = ad::add(x, mlp(p, pre + "mlp", norm(p, pre + "ln2", x)));
  }
  return linear(p, "dec/out", norm(p, "dec/norm", x));
}

Var pool_instance(Var latents, std::span<const std::size_t> offsets) {
  if (latents.shape().size() != 2 || latents.shape()[0] == 0) throw std::invalid_argument("pool_instance: empty");
  check_offsets(offsets, latents.shape()[0], "pool_instance");
  const std::size_t d = latents.shape()[1];
  std::vector<Var> rows;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s + 1] == offsets[s]) throw std::invalid_argument("pool_instance: sample " + std::to_string(s) + " has no tokens");
    rows.push_back(ad::mean(ad::slice(latents, 0, offsets[s], offsets[s + 1]), 0));
  }
  return ad::reshape(rows.size() == 1 ? rows[0] : ad::concat(rows, 0), {rows.size(), d});
}

tok::TokenBatch assemble_tokens(std::span<const data::Sample> samples, std::span<const tok::SampleDraw> draws,
                                const data::Registry& registry, const tok::TokenizerConfig& tokenizer,
                                const ModelParams& params, bool include_maps) {
  tok::TokenBatch batch = tok::assemble_tokens(samples, draws, registry, tokenizer, include_maps);
  if (batch.size() == 0) {
    batch.embeddings = Array(ad::Shape{0, sz(tokenizer.model_dim)});
    return batch;
  }
  Graph g;
  ParamVars p(g, params.learned, false);
  std::vector<std::size_t> rows(batch.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  batch.embeddings = embed_tokens(g, p, batch, rows, registry).value();
  return batch;
}

}  // namespace lmlite::model
