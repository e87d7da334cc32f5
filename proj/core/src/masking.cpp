// SPDX-License-Identifier: Apache-2.0
#include "lmlite/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lmlite/rng.hpp"

namespace lmlite::mask {

using data::ModalityKind;

std::string to_string(Category c) {
  switch (c) {
    case Category::NotSelected: return "not_selected";
    case Category::EncodeOnly: return "encode_only";
    case Category::DecodeOnly: return "decode_only";
    case Category::EncodeAndDecode: return "encode_and_decode";
  }
  return "?";
}

std::string to_string(MaskingMode m) {
  return m == MaskingMode::ModalityAware ? "modality_aware" : "uniform_random";
}

MaskingMode masking_mode_from_string(const std::string& s) {
  if (s == "modality_aware") return MaskingMode::ModalityAware;
  if (s == "uniform_random") return MaskingMode::UniformRandom;
  throw std::invalid_argument("unknown masking mode '" + s + "'");
}

void validate(const MaskConfig& c) {
  if (!(c.mask_ratio > 0.0 && c.mask_ratio < 1.0)) throw std::invalid_argument("masking: mask_ratio must be in (0, 1)");
  auto check = [](const std::array<double, kNumCategories>& p, const char* what) {
    double total = 0.0;
    for (double v : p) {
      if (v < 0.0) throw std::invalid_argument(std::string("masking: negative probability in ") + what);
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument(std::string("masking: ") + what + " must sum to 1");
  };
  check(c.observation_probs, "observation_probs");
  check(c.map_probs, "map_probs");
  if (c.map_probs[static_cast<int>(Category::EncodeOnly)] != 0.0 ||
      c.map_probs[static_cast<int>(Category::EncodeAndDecode)] != 0.0) {
    throw std::invalid_argument("masking: map bandsets may only be decode_only or not_selected");
  }
  if (c.min_encoded < 1 || c.min_decoded < 1) throw std::invalid_argument("masking: min_encoded/min_decoded must be >= 1");
  if (c.max_retries < 1) throw std::invalid_argument("masking: max_retries must be >= 1");
}

std::string describe(const MaskConfig& c) {
  std::ostringstream os;
  os << "MaskConfig{mode=" << to_string(c.mode) << ", ratio=" << c.mask_ratio << ", obs=[";
  for (std::size_t i = 0; i < kNumCategories; ++i) os << (i ? "," : "") << c.observation_probs[i];
  os << "], map=[";
  for (std::size_t i = 0; i < kNumCategories; ++i) os << (i ? "," : "") << c.map_probs[i];
  os << "], min_encoded=" << c.min_encoded << ", min_decoded=" << c.min_decoded
     << ", max_retries=" << c.max_retries << "}";
  return os.str();
}

namespace {

Category draw_category(Rng& rng, const std::array<double, kNumCategories>& probs) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < kNumCategories; ++i) {
    acc += probs[i];
    if (u < acc && probs[i] > 0.0) return static_cast<Category>(i);
  }
  // rounding at the top of the cumulative sum: last category with mass
  for (std::size_t i = kNumCategories; i-- > 0;) {
    if (probs[i] > 0.0) return static_cast<Category>(i);
  }
  return Category::NotSelected;
}

// Number of masked tokens among n for an Encode* bandset; at least one token
// always stays visible.
std::size_t masked_count(std::size_t n, double ratio) {
  if (n <= 1) return 0;
  const auto m = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-12));
  return std::clamp<std::size_t>(m, 1, n - 1);
}

// Marks `count` of `rows` (chosen uniformly without replacement) in `chosen`.
void choose_subset(Rng& rng, std::vector<std::size_t> rows, std::size_t count, std::vector<std::uint8_t>& chosen) {
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(rows.size() - i) - 1));
    std::swap(rows[i], rows[j]);
    chosen[rows[i]] = 1;
  }
}

}  // namespace

MaskPlan sample_mask_plan(const tok::TokenBatch& batch, const data::Registry& registry, const MaskConfig& config,
                          std::uint64_t seed, int view_id) {
  validate(config);
  const std::size_t nb = registry.num_bandsets();
  const std::size_t N = batch.size();
  MaskPlan plan;
  plan.view_id = view_id;
  plan.seed = seed;
  plan.visible.assign(N, 0);
  plan.target.assign(N, 0);

  for (std::size_t s = 0; s < batch.num_samples(); ++s) {
    const std::size_t lo = batch.sample_offsets[s];
    const std::size_t hi = batch.sample_offsets[s + 1];
    std::vector<std::vector<std::size_t>> rows(nb);
    for (std::size_t i = lo; i < hi; ++i) rows[batch.metas[i].bandset].push_back(i);

    std::vector<std::uint32_t> counts(nb);
    bool has_obs = false;
    for (std::size_t b = 0; b < nb; ++b) {
      counts[b] = static_cast<std::uint32_t>(rows[b].size());
      has_obs = has_obs || (counts[b] > 0 && registry.bandset(b).kind == ModalityKind::Observation);
    }
    if (!has_obs) {
      throw MaskingError("sample_mask_plan: sample " + std::to_string(s) + " has no observation bandset with tokens");
    }

    Rng rng = make_rng(seed, "mask_sample", {s});
    std::vector<Category> cats(nb, Category::NotSelected);
    std::vector<std::uint8_t> vis(N, 0);
    std::vector<std::uint8_t> tgt(N, 0);
    bool ok = false;
    for (int attempt = 0; attempt < config.max_retries && !ok; ++attempt) {
      std::fill(cats.begin(), cats.end(), Category::NotSelected);
      for (std::size_t i = lo; i < hi; ++i) vis[i] = tgt[i] = 0;

      if (config.mode == MaskingMode::ModalityAware) {
        for (std::size_t b = 0; b < nb; ++b) {
          if (counts[b] == 0) continue;
          const bool is_map = registry.bandset(b).kind == ModalityKind::Map;
          cats[b] = draw_category(rng, is_map ? config.map_probs : config.observation_probs);
        }
        for (std::size_t b = 0; b < nb; ++b) {
          const auto& r = rows[b];
          switch (cats[b]) {
            case Category::NotSelected: break;
            case Category::DecodeOnly:
              for (std::size_t i : r) tgt[i] = 1;
              break;
            case Category::EncodeOnly:
            case Category::EncodeAndDecode: {
              std::vector<std::uint8_t> masked(N, 0);
              choose_subset(rng, r, masked_count(r.size(), config.mask_ratio), masked);
              for (std::size_t i : r) {
                if (!masked[i]) vis[i] = 1;
                else if (cats[b] == Category::EncodeAndDecode) tgt[i] = 1;
              }
              break;
            }
          }
        }
      } else {
        // Uniform random masking over all observation tokens of the sample;
        // maps (when present) are always decode-only.
        std::vector<std::size_t> obs;
        for (std::size_t b = 0; b < nb; ++b) {
          if (registry.bandset(b).kind == ModalityKind::Observation) obs.insert(obs.end(), rows[b].begin(), rows[b].end());
        }
        std::vector<std::uint8_t> masked(N, 0);
        choose_subset(rng, obs, masked_count(obs.size(), config.mask_ratio), masked);
        for (std::size_t i : obs) (masked[i] ? tgt[i] : vis[i]) = 1;
        for (std::size_t b = 0; b < nb; ++b) {
          if (counts[b] == 0) continue;
          if (registry.bandset(b).kind == ModalityKind::Map) {
            for (std::size_t i : rows[b]) tgt[i] = 1;
            cats[b] = Category::DecodeOnly;
            continue;
          }
          bool any_v = false;
          bool any_t = false;
          for (std::size_t i : rows[b]) {
            any_v = any_v || vis[i];
            any_t = any_t || tgt[i];
          }
          cats[b] = any_v && any_t ? Category::EncodeAndDecode
                    : any_v        ? Category::EncodeOnly
                    : any_t        ? Category::DecodeOnly
                                   : Category::NotSelected;
        }
      }

      int encoded = 0;
      int decoded = 0;
      for (std::size_t b = 0; b < nb; ++b) {
        bool any_v = false;
        bool any_t = false;
        for (std::size_t i : rows[b]) {
          any_v = any_v || vis[i];
          any_t = any_t || tgt[i];
        }
        encoded += any_v;
        decoded += any_t;
      }
      ok = encoded >= config.min_encoded && decoded >= config.min_decoded;
      if (!ok) ++plan.retries;
    }
    if (!ok) {
      throw MaskingError("sample_mask_plan: retry budget exhausted for sample " + std::to_string(s) + " under " +
                         describe(config));
    }
    for (std::size_t i = lo; i < hi; ++i) {
      plan.visible[i] = vis[i];
      plan.target[i] = tgt[i];
    }
    plan.categories.push_back(cats);
    plan.tokens_per_bandset.push_back(std::move(counts));
  }
  return plan;
}

MaskedBatch apply_mask(const tok::TokenBatch& batch, const MaskPlan& plan) {
  if (plan.visible.size() != batch.size() || plan.target.size() != batch.size() ||
      plan.categories.size() != batch.num_samples()) {
    throw std::invalid_argument("apply_mask: plan was built for a different batch (" +
                                std::to_string(plan.visible.size()) + " tokens vs " + std::to_string(batch.size()) +
                                ")");
  }
  MaskedBatch out;
  out.encoder_offsets.push_back(0);
  out.target_offsets.push_back(0);
  for (std::size_t s = 0; s < batch.num_samples(); ++s) {
    for (std::size_t i = batch.sample_offsets[s]; i < batch.sample_offsets[s + 1]; ++i) {
      if (plan.visible[i]) out.encoder_rows.push_back(i);
      if (plan.target[i]) out.target_rows.push_back(i);
    }
    out.encoder_offsets.push_back(out.encoder_rows.size());
    out.target_offsets.push_back(out.target_rows.size());
  }
  return out;
}

std::vector<tok::TokenMeta> MaskedBatch::target_metas(const tok::TokenBatch& batch) const {
  std::vector<tok::TokenMeta> out;
  out.reserve(target_rows.size());
  for (std::size_t i : target_rows) out.push_back(batch.metas[i]);
  return out;
}

double PlanStatistics::frequency(ModalityKind kind, Category c) const {
  const auto& row = counts[kind == ModalityKind::Map ? 1 : 0];
  const std::size_t total = std::accumulate(row.begin(), row.end(), std::size_t{0});
  return total == 0 ? 0.0 : static_cast<double>(row[static_cast<std::size_t>(c)]) / static_cast<double>(total);
}

PlanStatistics plan_statistics(std::span<const MaskPlan> plans, const data::Registry& registry) {
  PlanStatistics st;
  st.plans = plans.size();
  double vis_sum = 0.0;
  std::size_t vis_n = 0;
  for (const MaskPlan& p : plans) {
    for (std::size_t s = 0; s < p.categories.size(); ++s) {
      for (std::size_t b = 0; b < p.categories[s].size(); ++b) {
        if (p.tokens_per_bandset[s][b] == 0) continue;
        const int kind = registry.bandset(b).kind == ModalityKind::Map ? 1 : 0;
        ++st.counts[kind][static_cast<std::size_t>(p.categories[s][b])];
      }
    }
    if (!p.visible.empty()) {
      vis_sum += static_cast<double>(std::accumulate(p.visible.begin(), p.visible.end(), std::size_t{0})) /
                 static_cast<double>(p.visible.size());
      ++vis_n;
    }
  }
  st.mean_visible_fraction = vis_n ? vis_sum / static_cast<double>(vis_n) : 0.0;
  return st;
}

std::vector<std::string> check_plan(const tok::TokenBatch& batch, const MaskPlan& plan, const data::Registry& registry,
                                    const MaskConfig& config) {
  std::vector<std::string> v;
  if (plan.visible.size() != batch.size() || plan.target.size() != batch.size()) {
    v.push_back("plan length differs from batch");
    return v;
  }
  const std::size_t nb = registry.num_bandsets();
  for (std::size_t s = 0; s < batch.num_samples(); ++s) {
    std::vector<std::size_t> n(nb, 0), nv(nb, 0), nt(nb, 0);
    for (std::size_t i = batch.sample_offsets[s]; i < batch.sample_offsets[s + 1]; ++i) {
      const auto b = batch.metas[i].bandset;
      ++n[b];
      nv[b] += plan.visible[i];
      nt[b] += plan.target[i];
      if (plan.visible[i] && plan.target[i]) v.push_back("token " + std::to_string(i) + " both visible and target");
    }
    int encoded = 0;
    int decoded = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      const Category c = plan.categories[s][b];
      const bool is_map = registry.bandset(b).kind == ModalityKind::Map;
      const std::string tag = "sample " + std::to_string(s) + " bandset " + registry.bandset(b).spec.id + ": ";
      if (is_map && nv[b] > 0) v.push_back(tag + "map tokens visible to encoder");
      if (is_map && (c == Category::EncodeOnly || c == Category::EncodeAndDecode)) {
        v.push_back(tag + "map in encoding category");
      }
      if (config.mode == MaskingMode::ModalityAware) {
        switch (c) {
          case Category::NotSelected:
            if (nv[b] || nt[b]) v.push_back(tag + "not_selected has tokens");
            break;
          case Category::EncodeOnly:
            if (nt[b] || (n[b] > 0 && nv[b] == 0)) v.push_back(tag + "encode_only layout wrong");
            break;
          case Category::DecodeOnly:
            if (nv[b] || nt[b] != n[b]) v.push_back(tag + "decode_only layout wrong");
            break;
          case Category::EncodeAndDecode:
            if (nv[b] + nt[b] != n[b] || nv[b] == 0) v.push_back(tag + "encode_and_decode layout wrong");
            break;
        }
      }
      encoded += nv[b] > 0;
      decoded += nt[b] > 0;
    }
    if (encoded < config.min_encoded) v.push_back("sample " + std::to_string(s) + ": no encoded bandset");
    if (decoded < config.min_decoded) v.push_back("sample " + std::to_string(s) + ": no decoded bandset");
  }
  return v;
}

}  // namespace lmlite::mask
