// SPDX-License-Identifier: Apache-2.0
#include "lmlite/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lmlite/rng.hpp"
#include "lmlite/tokenizer.hpp"
#include "lmlite/training.hpp"

namespace lmlite::eval {

using ad::Graph;
using ad::Shape;
using ad::Var;
using data::ModalityKind;

std::string to_string(Pooling p) { return p == Pooling::MeanOverTime ? "mean" : "max"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Pooling pooling_from_string(const std::string& s) {
  if (s == "mean") return Pooling::MeanOverTime;
  if (s == "max") return Pooling::MaxOverTime;
  throw std::invalid_argument("unknown pooling '" + s + "' (expected mean or max)");
}

void check_encoder(const Encoder& enc) {
  model::validate(enc.config);
  const auto d = static_cast<std::size_t>(enc.config.encoder.dim);
  auto expect = [&](const std::string& name, Shape shape) {
    auto it = enc.params.learned.find(name);
    if (it == enc.params.learned.end()) throw std::invalid_argument("encoder is missing parameter '" + name + "'");
    if (it->second.shape != shape) {
      throw std::invalid_argument("parameter '" + name + "' has shape " + ad::shape_str(it->second.shape) +
                                  " but the config implies " + ad::shape_str(shape));
    }
  };
  expect("modality_embed", {enc.registry.num_bandsets(), d});
  for (int l = 0; l < enc.config.encoder.depth; ++l) {
    expect("enc/" + std::to_string(l) + "/attn/qkv/w", {d, 3 * d});
  }
  expect("enc/norm/g", {d});
  if (enc.params.learned.count("enc/" + std::to_string(enc.config.encoder.depth) + "/ln1/g")) {
    throw std::invalid_argument("checkpoint holds more encoder blocks than the config depth");
  }
}

namespace {

struct EncodedChunk {
  tok::TokenBatch batch;
  Array latents;
};

std::vector<data::Sample> normalized(const Encoder& enc, std::span<const data::Sample> samples,
                                     const EmbedOptions& o) {
  return data::normalize(samples, o.stats_override ? *o.stats_override : enc.stats, enc.registry);
}

tok::SampleDraw eval_layout(const data::Sample& s, int patch_size, int max_timesteps) {
  tok::SampleDraw d = tok::full_layout(s, patch_size);
  const int T = static_cast<int>(s.timestamps.size());
  if (max_timesteps > 0 && T > max_timesteps) {
    d.t_begin = 0;
    d.t_count = max_timesteps;
  }
  return d;
}

tok::TokenizerConfig eval_tokenizer(const Encoder& enc, int patch_size) {
  tok::TokenizerConfig tc;
  tc.base_patch_size = enc.config.base_patch_size;
  tc.min_patch_size = 1;
  tc.max_patch_size = std::max(patch_size, enc.config.base_patch_size);
  tc.max_crop = 1 << 16;
  tc.min_timesteps = 0;
  tc.max_timesteps = 0;
  tc.model_dim = enc.config.encoder.dim;
  return tc;
}

template <typename Fn>
void encode_chunks(const Encoder& enc, std::span<const data::Sample> samples, const EmbedOptions& o, Fn&& sink) {
  const std::size_t chunk = 4;
  const tok::TokenizerConfig tc = eval_tokenizer(enc, o.patch_size);
  for (std::size_t lo = 0; lo < samples.size(); lo += chunk) {
    const auto part = samples.subspan(lo, std::min(chunk, samples.size() - lo));
    std::vector<tok::SampleDraw> draws;
    for (const auto& s : part) draws.push_back(eval_layout(s, o.patch_size, o.max_timesteps));
    EncodedChunk ec;
    ec.batch = tok::assemble_tokens(part, draws, enc.registry, tc, false);
    for (std::size_t s = 0; s < ec.batch.num_samples(); ++s) {
      if (ec.batch.sample_offsets[s + 1] == ec.batch.sample_offsets[s]) {
        throw std::invalid_argument("embed: sample " + std::to_string(lo + s) + " has no observation tokens");
      }
    }
    Graph g;
    model::ParamVars pv(g, enc.params.learned, false);
    std::vector<std::size_t> rows(ec.batch.size());
    std::iota(rows.begin(), rows.end(), 0);
    Var x = model::embed_tokens(g, pv, ec.batch, rows, enc.registry);
    ec.latents = model::encoder_forward(g, pv, enc.config, x, ec.batch.sample_offsets).value();
    sink(lo, ec);
  }
}

// Pools one sample's tokens over time per (position, bandset), then averages
// the bandsets present at each position. Returns [grid*grid, d] plus a flag
// per position telling whether it had tokens.
Array pool_positions(const EncodedChunk& ec, std::size_t s, Pooling pooling, std::size_t num_bandsets,
                     std::vector<std::uint8_t>& seen) {
  const std::size_t d = ec.latents.dim(1);
  const int grid = ec.batch.draws[s].crop_side;
  const auto P = static_cast<std::size_t>(grid * grid);
  const std::size_t nb = num_bandsets;
  Array acc(Shape{P * nb, d}, pooling == Pooling::MaxOverTime ? -std::numeric_limits<double>::infinity() : 0.0);
  std::vector<std::size_t> count(P * nb, 0);
  for (std::size_t i = ec.batch.sample_offsets[s]; i < ec.batch.sample_offsets[s + 1]; ++i) {
    const auto& m = ec.batch.metas[i];
    const std::size_t slot = static_cast<std::size_t>(m.row * grid + m.col) * nb + m.bandset;
    ++count[slot];
    for (std::size_t c = 0; c < d; ++c) {
      const double v = ec.latents.at(i, c);
      double& o = acc.at(slot, c);
      o = pooling == Pooling::MaxOverTime ? std::max(o, v) : o + v;
    }
  }
  Array out(Shape{P, d}, 0.0);
  seen.assign(P, 0);
  for (std::size_t p = 0; p < P; ++p) {
    std::size_t bandsets = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t slot = p * nb + b;
      if (count[slot] == 0) continue;
      ++bandsets;
      const double scale = pooling == Pooling::MeanOverTime ? 1.0 / static_cast<double>(count[slot]) : 1.0;
      for (std::size_t c = 0; c < d; ++c) out.at(p, c) += acc.at(slot, c) * scale;
    }
    if (bandsets == 0) continue;
    seen[p] = 1;
    for (std::size_t c = 0; c < d; ++c) out.at(p, c) /= static_cast<double>(bandsets);
  }
  return out;
}

}  // namespace

std::vector<EmbeddingSet> embed(const Encoder& enc, std::span<const data::Sample> samples, const EmbedOptions& o,
                                std::span<const Pooling> poolings, Split split) {
  check_encoder(enc);
  const auto d = static_cast<std::size_t>(enc.config.encoder.dim);
  std::vector<EmbeddingSet> out(poolings.size());
  for (std::size_t k = 0; k < poolings.size(); ++k) {
    auto& e = out[k];
    e.split = split;
    e.pooling = poolings[k];
    e.norm = o.stats_override ? o.stats_override->provenance : enc.stats.provenance;
    e.vectors = Array(Shape{samples.size(), d});
    for (const auto& s : samples) {
      e.labels.push_back(s.label.value_or(-1));
      e.location_ids.push_back(s.location_id);
    }
  }
  if (samples.empty() || poolings.empty()) return out;
  const std::vector<data::Sample> norm = normalized(enc, samples, o);
  encode_chunks(enc, norm, o, [&](std::size_t lo, const EncodedChunk& ec) {
    std::vector<std::uint8_t> seen;
    for (std::size_t s = 0; s < ec.batch.num_samples(); ++s) {
      for (std::size_t k = 0; k < poolings.size(); ++k) {
        const Array pos = pool_positions(ec, s, poolings[k], enc.registry.num_bandsets(), seen);
        const std::size_t used = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), 1));
        double* v = out[k].vectors.data.data() + (lo + s) * d;
        for (std::size_t p = 0; p < seen.size(); ++p) {
          if (!seen[p]) continue;
          for (std::size_t c = 0; c < d; ++c) v[c] += pos.at(p, c);
        }
        for (std::size_t c = 0; c < d; ++c) v[c] /= static_cast<double>(used);
      }
    }
  });
  return out;
}

EmbeddingSet embed(const Encoder& enc, std::span<const data::Sample> samples, const EmbedOptions& o, Split split) {
  const Pooling p[] = {o.pooling};
  return std::move(embed(enc, samples, o, p, split).front());
}

Array embed_spatial(const Encoder& enc, std::span<const data::Sample> samples, const EmbedOptions& o) {
  check_encoder(enc);
  if (samples.empty()) throw std::invalid_argument("embed_spatial: no samples");
  const auto d = static_cast<std::size_t>(enc.config.encoder.dim);
  std::size_t P = 0;
  Array out;
  const std::vector<data::Sample> norm = normalized(enc, samples, o);
  encode_chunks(enc, norm, o, [&](std::size_t lo, const EncodedChunk& ec) {
    std::vector<std::uint8_t> seen;
    for (std::size_t s = 0; s < ec.batch.num_samples(); ++s) {
      const Array pos = pool_positions(ec, s, o.pooling, enc.registry.num_bandsets(), seen);
      if (P == 0) {
        P = pos.dim(0);
        out = Array(Shape{samples.size(), P, d});
      }
      if (pos.dim(0) != P) throw std::invalid_argument("embed_spatial: samples have different token grids");
      std::copy(pos.data.begin(), pos.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>((lo + s) * P * d));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------

std::vector<int> knn_classify(const Array& train, std::span<const int> train_labels, const Array& queries, int k) {
  if (train.rank() != 2 || train.dim(0) == 0) throw std::invalid_argument("knn_classify: empty training set");
  if (train_labels.size() != train.dim(0)) throw std::invalid_argument("knn_classify: one label per training row");
  if (k < 1 || static_cast<std::size_t>(k) > train.dim(0)) {
    throw std::invalid_argument("knn_classify: k=" + std::to_string(k) + " exceeds the " +
                                std::to_string(train.dim(0)) + " training vectors");
  }
  if (queries.rank() != 2 || queries.dim(1) != train.dim(1)) {
    throw std::invalid_argument("knn_classify: query dim differs from training dim");
  }
  const std::size_t n = train.dim(0);
  const std::size_t d = train.dim(1);
  auto unit = [d](const double* v, std::vector<double>& out) {
    double nn = 0.0;
    for (std::size_t c = 0; c < d; ++c) nn += v[c] * v[c];
    const double inv = 1.0 / std::max(std::sqrt(nn), 1e-12);
    out.resize(d);
    for (std::size_t c = 0; c < d; ++c) out[c] = v[c] * inv;
  };
  std::vector<std::vector<double>> tn(n);
  for (std::size_t i = 0; i < n; ++i) unit(train.data.data() + i * d, tn[i]);
  const int num_classes = *std::max_element(train_labels.begin(), train_labels.end()) + 1;

  std::vector<int> pred;
  std::vector<double> q;
  std::vector<std::pair<double, std::size_t>> sims(n);
  for (std::size_t r = 0; r < queries.dim(0); ++r) {
    unit(queries.data.data() + r * d, q);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += q[c] * tn[i][c];
      sims[i] = {s, i};
    }
    std::partial_sort(sims.begin(), sims.begin() + k, sims.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<int> votes(static_cast<std::size_t>(num_classes), 0);
    std::vector<double> mass(static_cast<std::size_t>(num_classes), 0.0);
    for (int j = 0; j < k; ++j) {
      const int lab = train_labels[sims[j].second];
      ++votes[lab];
      mass[lab] += sims[j].first;
    }
    int best = 0;
    for (int c = 1; c < num_classes; ++c) {
      if (votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best])) best = c;
    }
    pred.push_back(best);
  }
  return pred;
}

// ---------------------------------------------------------------------------

double accuracy(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size() || pred.empty()) throw std::invalid_argument("accuracy: size mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double micro_f1(std::span<const int> pred, std::span<const int> truth, int num_classes) {
  if (pred.size() != truth.size() || pred.empty()) throw std::invalid_argument("micro_f1: size mismatch or empty");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (int c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == c && truth[i] == c) ++tp;
      else if (pred[i] == c) ++fp;
      else if (truth[i] == c) ++fn;
    }
  }
  const double denom = static_cast<double>(2 * tp + fp + fn);
  return denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
}

double mean_iou(std::span<const int> pred, std::span<const int> truth, int num_classes) {
  if (pred.size() != truth.size() || pred.empty()) throw std::invalid_argument("mean_iou: size mismatch or empty");
  double total = 0.0;
  int used = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] == c;
      const bool t = truth[i] == c;
      inter += p && t;
      uni += p || t;
    }
    if (uni == 0) continue;
    total += static_cast<double>(inter) / static_cast<double>(uni);
    ++used;
  }
  return used == 0 ? 0.0 : total / used;
}

// ---------------------------------------------------------------------------

std::size_t select_best(std::span<const SweepPoint> grid) {
  if (grid.empty()) throw std::invalid_argument("select_best: empty sweep");
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (grid[i].val > grid[best].val) best = i;
  }
  return best;
}

const std::vector<double>& default_probe_lrs() {
  static const std::vector<double> lrs{1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1};
  return lrs;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

int class_count(std::initializer_list<const std::vector<int>*> sets) {
  int c = 0;
  for (const auto* s : sets) {
    for (int l : *s) c = std::max(c, l + 1);
  }
  return c;
}

std::vector<int> argmax_rows(const Array& logits) {
  std::vector<int> out(logits.dim(0));
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.dim(1); ++c) {
      if (logits.at(i, c) > logits.at(i, best)) best = c;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

Array linear_logits(const Array& x, const Array& w, const Array& b) {
  Graph g;
  return ad::add(ad::matmul(g.constant(x), g.constant(w)), g.constant(b)).value();
}

}  // namespace

SweepResult linear_probe(const EmbeddingSet& train, const EmbeddingSet& val, const EmbeddingSet& test,
                         const ProbeConfig& config) {
  if (config.lrs.empty()) throw std::invalid_argument("linear_probe: empty learning-rate grid");
  if (train.size() == 0 || val.size() == 0 || test.size() == 0) throw std::invalid_argument("linear_probe: empty split");
  const std::set<int> distinct(train.labels.begin(), train.labels.end());
  if (distinct.size() < 2) throw std::invalid_argument("linear_probe: training split has a single class");
  for (int l : train.labels) {
    if (l < 0) throw std::invalid_argument("linear_probe: unlabeled training sample");
  }
  const int C = class_count({&train.labels, &val.labels, &test.labels});
  const std::size_t d = train.vectors.dim(1);

  train::OptimConfig oc;
  oc.weight_decay = 0.0;
  SweepResult res;
  for (double lr : config.lrs) {
    train::ParamMap params;
    params["w"] = Array(Shape{d, static_cast<std::size_t>(C)}, 0.0);
    params["b"] = Array(Shape{static_cast<std::size_t>(C)}, 0.0);
    train::AdamState st;
    std::vector<std::size_t> labels(train.labels.begin(), train.labels.end());
    for (int e = 0; e < config.epochs; ++e) {
      Graph g;
      Var w = g.leaf(params["w"], true);
      Var b = g.leaf(params["b"], true);
      Var logits = ad::add(ad::matmul(g.constant(train.vectors), w), b);
      Var loss = ad::scale(ad::sum(ad::pick(ad::log_softmax(logits), labels)),
                           -1.0 / static_cast<double>(labels.size()));
      g.backward(loss);
      train::ParamMap grads{{"w", *g.grad(w)}, {"b", *g.grad(b)}};
      if (!train::adamw_step(params, st, grads, lr, oc)) break;
    }
    SweepPoint pt;
    pt.params["lr"] = fmt(lr);
    pt.val = accuracy(argmax_rows(linear_logits(val.vectors, params["w"], params["b"])), val.labels);
    pt.test = accuracy(argmax_rows(linear_logits(test.vectors, params["w"], params["b"])), test.labels);
    res.grid.push_back(pt);
  }
  res.selected = select_best(res.grid);
  return res;
}

// ---------------------------------------------------------------------------

std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::Linear: return "linear";
    case HeadKind::Mlp3: return "mlp3";
    case HeadKind::TransposedConvSeg: return "tconv_seg";
  }
  return "?";
}

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "linear") return HeadKind::Linear;
  if (s == "mlp3") return HeadKind::Mlp3;
  if (s == "tconv_seg") return HeadKind::TransposedConvSeg;
  throw std::invalid_argument("unknown head '" + s + "' (expected linear, mlp3 or tconv_seg)");
}

PlateauScheduler::PlateauScheduler(double lr, double factor, int patience, int cooldown)
    : lr_(lr), factor_(factor), patience_(patience), cooldown_(cooldown), best_(0.0) {
  if (!(factor > 0.0 && factor < 1.0)) throw std::invalid_argument("plateau: factor must be in (0, 1)");
  if (patience < 0 || cooldown < 0) throw std::invalid_argument("plateau: patience/cooldown must be >= 0");
}

bool PlateauScheduler::step(double metric) {
  if (first_ || metric > best_) {
    best_ = metric;
    bad_epochs_ = 0;
    first_ = false;
  } else {
    ++bad_epochs_;
  }
  if (cooldown_left_ > 0) {
    --cooldown_left_;
    bad_epochs_ = 0;
    return false;
  }
  if (bad_epochs_ >= patience_ && bad_epochs_ > 0) {
    lr_ *= factor_;
    cooldown_left_ = cooldown_;
    bad_epochs_ = 0;
    ++reductions_;
    return true;
  }
  return false;
}

int frozen_epochs(const FinetuneRecipe& r) {
  if (!(r.freeze_fraction >= 0.0 && r.freeze_fraction < 1.0)) {
    throw std::invalid_argument("finetune: freeze_fraction must be in [0, 1)");
  }
  return static_cast<int>(std::ceil(r.freeze_fraction * r.epochs - 1e-12));
}

void check_splits(const TaskData& task) {
  std::map<std::int64_t, std::string> owner;
  const std::pair<const char*, const std::vector<data::Sample>*> splits[] = {
      {"train", &task.train}, {"val", &task.val}, {"test", &task.test}};
  for (const auto& [name, samples] : splits) {
    for (const auto& s : *samples) {
      auto [it, fresh] = owner.emplace(s.location_id, name);
      if (!fresh && it->second != name) {
        throw std::invalid_argument("location " + std::to_string(s.location_id) + " appears in both " + it->second +
                                    " and " + name + " splits");
      }
    }
  }
}

namespace {

struct FtBatch {
  tok::TokenBatch tokens;
  std::vector<std::size_t> labels;  // per sample (classification) or per pixel (segmentation)
  Array pool;                       // [B or B*grid*grid, N] averaging matrix
  std::size_t grid = 0;
};

FtBatch make_ft_batch(const Encoder& enc, const TaskData& task, std::span<const data::Sample> samples,
                      const FinetuneRecipe& r) {
  FtBatch fb;
  std::vector<tok::SampleDraw> draws;
  for (const auto& s : samples) draws.push_back(eval_layout(s, r.patch_size, r.max_timesteps));
  fb.tokens = tok::assemble_tokens(samples, draws, enc.registry, eval_tokenizer(enc, r.patch_size), false);
  const std::size_t N = fb.tokens.size();
  const std::size_t B = samples.size();
  if (!task.segmentation) {
    fb.pool = Array(Shape{B, N}, 0.0);
    for (std::size_t s = 0; s < B; ++s) {
      const std::size_t lo = fb.tokens.sample_offsets[s];
      const std::size_t hi = fb.tokens.sample_offsets[s + 1];
      if (hi == lo) throw std::invalid_argument("finetune: sample without observation tokens");
      for (std::size_t i = lo; i < hi; ++i) fb.pool.at(s, i) = 1.0 / static_cast<double>(hi - lo);
      fb.labels.push_back(static_cast<std::size_t>(samples[s].label.value()));
    }
    return fb;
  }
  fb.grid = static_cast<std::size_t>(draws[0].crop_side);
  const std::size_t P = fb.grid * fb.grid;
  fb.pool = Array(Shape{B * P, N}, 0.0);
  for (std::size_t s = 0; s < B; ++s) {
    std::vector<std::size_t> count(P, 0);
    for (std::size_t i = fb.tokens.sample_offsets[s]; i < fb.tokens.sample_offsets[s + 1]; ++i) {
      ++count[static_cast<std::size_t>(fb.tokens.metas[i].row) * fb.grid + fb.tokens.metas[i].col];
    }
    for (std::size_t i = fb.tokens.sample_offsets[s]; i < fb.tokens.sample_offsets[s + 1]; ++i) {
      const auto p = static_cast<std::size_t>(fb.tokens.metas[i].row) * fb.grid + fb.tokens.metas[i].col;
      fb.pool.at(s * P + p, i) = 1.0 / static_cast<double>(count[p]);
    }
    const data::BandsetRaster* map = samples[s].find(task.map_bandset);
    if (!map) throw std::invalid_argument("finetune: segmentation sample lacks map '" + task.map_bandset + "'");
    for (int y = 0; y < map->height; ++y) {
      for (int x = 0; x < map->width; ++x) fb.labels.push_back(static_cast<std::size_t>(map->at(0, y, x, 0)));
    }
  }
  return fb;
}

// Transposed convolution with kernel == stride, as matmul + pixel shuffle.
// x [B*g*g, cin] -> [B*(g*s)*(g*s), cout].
Var tconv(const model::ParamVars& p, const std::string& name, Var x, std::size_t B, std::size_t g, std::size_t s) {
  Var y = ad::matmul(x, p[name + "/w"]);
  const std::size_t cout = p[name + "/b"].shape()[0];
  y = ad::reshape(y, {B, g, g, s, s, cout});
  y = ad::permute(y, {0, 1, 3, 2, 4, 5});
  y = ad::reshape(y, {B * g * s * g * s, cout});
  return ad::add(y, p[name + "/b"]);
}

std::pair<std::size_t, std::size_t> seg_strides(int patch) {
  const auto p = static_cast<std::size_t>(patch);
  const std::size_t s2 = (p % 2 == 0 && p > 1) ? 2 : 1;
  return {p / s2, s2};
}

Var head_forward(const model::ParamVars& p, HeadKind head, Var pooled, const FtBatch& fb, int patch) {
  switch (head) {
    case HeadKind::Linear:
      return ad::add(ad::matmul(pooled, p["head/fc/w"]), p["head/fc/b"]);
    case HeadKind::Mlp3: {
      Var h = ad::gelu(ad::add(ad::matmul(pooled, p["head/fc1/w"]), p["head/fc1/b"]));
      h = ad::gelu(ad::add(ad::matmul(h, p["head/fc2/w"]), p["head/fc2/b"]));
      return ad::add(ad::matmul(h, p["head/fc3/w"]), p["head/fc3/b"]);
    }
    case HeadKind::TransposedConvSeg: {
      const auto [s1, s2] = seg_strides(patch);
      const std::size_t B = fb.tokens.num_samples();
      Var h = ad::gelu(tconv(p, "head/up1", pooled, B, fb.grid, s1));
      return tconv(p, "head/up2", h, B, fb.grid * s1, s2);
    }
  }
  throw std::logic_error("unreachable");
}

train::ParamMap init_head(HeadKind head, std::size_t d, std::size_t C, int patch, std::uint64_t seed) {
  Rng rng = make_rng(seed, "finetune_head");
  train::ParamMap m;
  auto lin = [&](const std::string& name, std::size_t in, std::size_t out, std::size_t bias) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    Array w(Shape{in, out});
    for (double& v : w.data) v = (2.0 * uniform01(rng) - 1.0) * a;
    m[name + "/w"] = std::move(w);
    m[name + "/b"] = Array(Shape{bias}, 0.0);
  };
  switch (head) {
    case HeadKind::Linear:
      lin("head/fc", d, C, C);
      break;
    case HeadKind::Mlp3:
      lin("head/fc1", d, d, d);
      lin("head/fc2", d, d, d);
      lin("head/fc3", d, C, C);
      break;
    case HeadKind::TransposedConvSeg: {
      const auto [s1, s2] = seg_strides(patch);
      const std::size_t hidden = std::max<std::size_t>(d / 2, C);
      lin("head/up1", d, s1 * s1 * hidden, hidden);
      lin("head/up2", hidden, s2 * s2 * C, C);
      break;
    }
  }
  return m;
}

double evaluate(const Encoder& enc, const TaskData& task, const FinetuneRecipe& r, const train::ParamMap& encp,
                const train::ParamMap& headp, std::span<const data::Sample> samples) {
  std::vector<int> pred;
  std::vector<int> truth;
  const auto bs = static_cast<std::size_t>(r.batch_size);
  for (std::size_t lo = 0; lo < samples.size(); lo += bs) {
    const auto part = samples.subspan(lo, std::min(bs, samples.size() - lo));
    const FtBatch fb = make_ft_batch(enc, task, part, r);
    Graph g;
    model::ParamVars pe(g, encp, false);
    model::ParamVars ph(g, headp, false);
    std::vector<std::size_t> rows(fb.tokens.size());
    std::iota(rows.begin(), rows.end(), 0);
    Var lat = model::encoder_forward(g, pe, enc.config, model::embed_tokens(g, pe, fb.tokens, rows, enc.registry),
                                     fb.tokens.sample_offsets);
    const Array logits = head_forward(ph, r.head, ad::matmul(g.constant(fb.pool), lat), fb, r.patch_size).value();
    const auto p = argmax_rows(logits);
    pred.insert(pred.end(), p.begin(), p.end());
    for (std::size_t l : fb.labels) truth.push_back(static_cast<int>(l));
  }
  return task.segmentation ? mean_iou(pred, truth, task.num_classes) : accuracy(pred, truth);
}

}  // namespace

FinetuneResult finetune(const Encoder& enc, const TaskData& task, const FinetuneRecipe& r) {
  check_encoder(enc);
  check_splits(task);
  if (r.epochs < 1) throw std::invalid_argument("finetune: epochs must be >= 1");
  if (task.train.empty() || task.val.empty() || task.test.empty()) {
    throw std::invalid_argument("finetune: train, val and test splits are all required");
  }
  if (task.segmentation != (r.head == HeadKind::TransposedConvSeg)) {
    throw std::invalid_argument("finetune: head '" + to_string(r.head) + "' does not fit a " +
                                (task.segmentation ? "segmentation" : "classification") + " task");
  }
  const int n_frozen = frozen_epochs(r);
  const auto d = static_cast<std::size_t>(enc.config.encoder.dim);

  const data::NormStats& stats = enc.stats;
  const auto train_s = data::normalize(task.train, stats, enc.registry);
  const auto val_s = data::normalize(task.val, stats, enc.registry);
  const auto test_s = data::normalize(task.test, stats, enc.registry);

  train::ParamMap encp;
  for (const auto& [name, a] : enc.params.learned) {
    if (name.starts_with("proj/") || name.starts_with("enc/") || name == "modality_embed") encp[name] = a;
  }
  train::ParamMap headp = init_head(r.head, d, static_cast<std::size_t>(task.num_classes), r.patch_size, r.seed);
  train::AdamState enc_adam;
  train::AdamState head_adam;
  train::OptimConfig oc;
  oc.weight_decay = r.weight_decay;

  PlateauScheduler sched(r.lr, r.plateau_factor, r.patience, r.cooldown);
  FinetuneResult res;
  res.metric_name = task.segmentation ? "miou" : "accuracy";
  train::ParamMap best_enc = encp;
  train::ParamMap best_head = headp;
  bool have_best = false;

  const auto bs = static_cast<std::size_t>(r.batch_size);
  for (int epoch = 0; epoch < r.epochs; ++epoch) {
    const bool frozen = epoch < n_frozen;
    FinetuneEpoch rec;
    rec.epoch = epoch + 1;
    rec.lr = sched.lr();
    rec.encoder_frozen = frozen;

    std::vector<std::size_t> order(train_s.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(r.seed, "finetune_epoch", {static_cast<std::uint64_t>(epoch)});
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i) - 1))]);
    }
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += bs) {
      std::vector<data::Sample> part;
      for (std::size_t i = lo; i < std::min(order.size(), lo + bs); ++i) part.push_back(train_s[order[i]]);
      const FtBatch fb = make_ft_batch(enc, task, part, r);
      Graph g;
      model::ParamVars pe(g, encp, !frozen);
      model::ParamVars ph(g, headp, true);
      std::vector<std::size_t> rows(fb.tokens.size());
      std::iota(rows.begin(), rows.end(), 0);
      Var lat = model::encoder_forward(g, pe, enc.config, model::embed_tokens(g, pe, fb.tokens, rows, enc.registry),
                                       fb.tokens.sample_offsets);
      Var logits = head_forward(ph, r.head, ad::matmul(g.constant(fb.pool), lat), fb, r.patch_size);
      Var loss = ad::scale(ad::sum(ad::pick(ad::log_softmax(logits), fb.labels)),
                           -1.0 / static_cast<double>(fb.labels.size()));
      g.backward(loss);
      loss_sum += loss.value().item();
      ++batches;

      train::ParamMap eg;
      train::ParamMap hg;
      double enc_norm2 = 0.0;
      for (const auto& [name, v] : pe.vars()) {
        const Array* gr = g.grad(v);
        Array a = gr && !gr->data.empty() ? *gr : Array(v.shape(), 0.0);
        for (double x : a.data) enc_norm2 += x * x;
        eg[name] = std::move(a);
      }
      for (const auto& [name, v] : ph.vars()) {
        const Array* gr = g.grad(v);
        hg[name] = gr && !gr->data.empty() ? *gr : Array(v.shape(), 0.0);
      }
      if (lo == 0) rec.encoder_grad_norm = std::sqrt(enc_norm2);
      train::adamw_step(headp, head_adam, hg, sched.lr(), oc);
      if (!frozen) train::adamw_step(encp, enc_adam, eg, sched.lr(), oc);
    }
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val_metric = evaluate(enc, task, r, encp, headp, val_s);
    if (!have_best || rec.val_metric > res.best_val) {
      have_best = true;
      res.best_val = rec.val_metric;
      res.best_epoch = rec.epoch;
      best_enc = encp;
      best_head = headp;
    }
    sched.step(rec.val_metric);
    res.epochs.push_back(rec);
  }
  if (!have_best) throw std::logic_error("finetune: validation metric was never computed");
  res.test_metric = evaluate(enc, task, r, best_enc, best_head, test_s);
  res.best_params.learned = best_enc;
  for (auto& [n, a] : best_head) res.best_params.learned[n] = a;

  SweepPoint pt;
  pt.params["lr"] = fmt(r.lr);
  pt.params["head"] = to_string(r.head);
  pt.params["best_epoch"] = std::to_string(res.best_epoch);
  pt.val = res.best_val;
  pt.test = res.test_metric;
  res.sweep.grid.push_back(pt);
  res.sweep.selected = 0;
  return res;
}

// ---------------------------------------------------------------------------

std::vector<RankRow> rank_summary(const std::map<std::string, std::map<std::string, double>>& results) {
  std::set<std::string> tasks;
  for (const auto& [_, per] : results) {
    for (const auto& [t, __] : per) tasks.insert(t);
  }
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& [m, _] : results) acc[m] = {0.0, 0};
  for (const auto& t : tasks) {
    std::vector<std::pair<std::string, double>> entries;
    for (const auto& [m, per] : results) {
      if (auto it = per.find(t); it != per.end()) entries.emplace_back(m, it->second);
    }
    const auto n = static_cast<double>(entries.size());
    for (const auto& [m, v] : entries) {
      // average rank: 1 + #better + (#equal - 1) / 2
      double better = 0.0, equal = 0.0;
      for (const auto& [m2, v2] : entries) {
        if (v2 > v) better += 1.0;
        else if (v2 == v) equal += 1.0;
      }
      const double rank = 1.0 + better + (equal - 1.0) / 2.0;
      acc[m].first += (n - rank + 1.0) / n;
      acc[m].second += 1;
    }
  }
  std::vector<RankRow> rows;
  for (const auto& [m, a] : acc) rows.push_back({m, a.second ? a.first / a.second : 0.0, a.second});
  std::stable_sort(rows.begin(), rows.end(),
                   [](const RankRow& a, const RankRow& b) { return a.mean_inverted_rank > b.mean_inverted_rank; });
  return rows;
}

std::string rank_table_text(const std::vector<RankRow>& rows) {
  std::ostringstream os;
  std::size_t w = 5;
  for (const auto& r : rows) w = std::max(w, r.model.size());
  os << std::left << std::setw(static_cast<int>(w)) << "model" << "  inv_rank  tasks\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(w)) << r.model << "  " << std::fixed << std::setprecision(4)
       << std::setw(8) << r.mean_inverted_rank << "  " << r.tasks << "\n";
  }
  return os.str();
}

std::string rank_table_csv(const std::vector<RankRow>& rows) {
  std::ostringstream os;
  os << "model,mean_inverted_rank,tasks\n";
  for (const auto& r : rows) os << r.model << "," << std::setprecision(17) << r.mean_inverted_rank << "," << r.tasks << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------

std::string to_json(const EvalReport& r) {
  nlohmann::json j;
  j["task"] = r.task;
  j["model"] = r.model;
  j["mode"] = r.mode;
  j["metric"] = r.metric_name;
  j["provenance"] = r.provenance;
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& p : r.sweep.grid) grid.push_back({{"params", p.params}, {"val", p.val}, {"test", p.test}});
  j["sweep"] = grid;
  j["selected"] = r.sweep.selected;
  j["test_metric"] = r.sweep.grid.empty() ? 0.0 : r.test_metric();
  if (!r.epochs.empty()) {
    nlohmann::json ep = nlohmann::json::array();
    for (const auto& e : r.epochs) {
      ep.push_back({{"epoch", e.epoch},
                    {"lr", e.lr},
                    {"encoder_frozen", e.encoder_frozen},
                    {"encoder_grad_norm", e.encoder_grad_norm},
                    {"train_loss", e.train_loss},
                    {"val", e.val_metric}});
    }
    j["epochs"] = ep;
  }
  return j.dump(2) + "\n";
}

std::string to_text(const EvalReport& r) {
  std::ostringstream os;
  os << "task " << r.task << "  model " << r.model << "  mode " << r.mode << "\n";
  for (const auto& [k, v] : r.provenance) os << "  " << k << " = " << v << "\n";
  os << std::left << std::setw(40) << "point" << std::setw(10) << "val" << std::setw(10) << "test" << "\n";
  for (std::size_t i = 0; i < r.sweep.grid.size(); ++i) {
    const auto& p = r.sweep.grid[i];
    std::string desc;
    for (const auto& [k, v] : p.params) desc += (desc.empty() ? "" : " ") + k + "=" + v;
    os << std::left << std::setw(40) << desc << std::fixed << std::setprecision(4) << std::setw(10) << p.val
       << std::setw(10) << p.test << (i == r.sweep.selected ? "  <- selected" : "") << "\n";
    os.unsetf(std::ios::fixed);
  }
  os << r.metric_name << " (test, selected): " << std::fixed << std::setprecision(4)
     << (r.sweep.grid.empty() ? 0.0 : r.test_metric()) << "\n";
  return os.str();
}

}  // namespace lmlite::eval
