// SPDX-License-Identifier: Apache-2.0
#include "lmlite/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "lmlite/rng.hpp"

namespace lmlite::data {

std::string to_string(ModalityKind k) { return k == ModalityKind::Map ? "map" : "observation"; }
std::string to_string(Temporality t) { return t == Temporality::Static ? "static" : "time_series"; }
std::string to_string(StatsProvenance p) {
  return p == StatsProvenance::Pretraining ? "pretraining" : "eval_set";
}

// ---------------------------------------------------------------------------
// Registry

Registry::Registry(std::vector<ModalitySpec> modalities) : modalities_(std::move(modalities)) {
  std::set<std::string> seen;
  for (std::size_t m = 0; m < modalities_.size(); ++m) {
    const ModalitySpec& mod = modalities_[m];
    if (mod.bandsets.empty()) throw std::invalid_argument("modality '" + mod.id + "' has no bandsets");
    if (mod.kind == ModalityKind::Map && mod.num_classes < 2) {
      throw std::invalid_argument("map modality '" + mod.id + "' needs num_classes >= 2");
    }
    for (const BandsetSpec& b : mod.bandsets) {
      if (b.band_count < 1) throw std::invalid_argument("bandset '" + b.id + "' has band_count < 1");
      if (!seen.insert(b.id).second) throw std::invalid_argument("duplicate bandset id '" + b.id + "'");
      BandsetInfo info;
      info.spec = b;
      info.spec.modality_id = mod.id;
      info.modality_index = m;
      info.kind = mod.kind;
      info.temporal = mod.temporal;
      info.channels = mod.kind == ModalityKind::Map ? mod.num_classes : b.band_count;
      if (mod.kind == ModalityKind::Map && b.band_count != 1) {
        throw std::invalid_argument("map bandset '" + b.id + "' must hold a single class band");
      }
      bandsets_.push_back(std::move(info));
    }
  }
}

Registry Registry::default_registry(int map_classes) {
  using MK = ModalityKind;
  using TP = Temporality;
  return Registry({
      {"s1", MK::Observation, TP::TimeSeries, {{"s1_vv_vh", "s1", 2}}, 0},
      {"s2",
       MK::Observation,
       TP::TimeSeries,
       {{"s2_10m", "s2", 4}, {"s2_20m", "s2", 3}, {"s2_60m", "s2", 2}},
       0},
      {"l8", MK::Observation, TP::TimeSeries, {{"l8_ms", "l8", 3}, {"l8_pan_tir", "l8", 2}}, 0},
      {"worldcover", MK::Map, TP::Static, {{"worldcover", "worldcover", 1}}, map_classes},
  });
}

std::optional<std::size_t> Registry::find_bandset(std::string_view id) const {
  for (std::size_t i = 0; i < bandsets_.size(); ++i) {
    if (bandsets_[i].spec.id == id) return i;
  }
  return std::nullopt;
}

std::size_t Registry::bandset_index(std::string_view id) const {
  if (auto i = find_bandset(id)) return *i;
  throw std::out_of_range("unknown bandset '" + std::string(id) + "'");
}

Registry Registry::without_maps() const {
  std::vector<ModalitySpec> kept;
  for (const auto& m : modalities_) {
    if (m.kind != ModalityKind::Map) kept.push_back(m);
  }
  return Registry(std::move(kept));
}

bool Registry::has_maps() const {
  return std::any_of(modalities_.begin(), modalities_.end(),
                     [](const ModalitySpec& m) { return m.kind == ModalityKind::Map; });
}

bool BandsetRaster::any_present() const {
  return std::any_of(present.begin(), present.end(), [](std::uint8_t p) { return p != 0; });
}

const BandsetRaster* Sample::find(std::string_view id) const {
  for (const auto& r : rasters) {
    if (r.bandset_id == id) return &r;
  }
  return nullptr;
}

BandsetRaster* Sample::find(std::string_view id) {
  return const_cast<BandsetRaster*>(std::as_const(*this).find(id));
}

// ---------------------------------------------------------------------------
// Generator

namespace {

struct Wave {
  double amp, fx, fy, phase, drift;
};

// Low-frequency latent field: offset + seasonal term + three drifting
// sinusoids per channel.
struct LatentField {
  std::vector<double> offset;
  std::vector<double> season_amp;
  std::vector<double> season_phase;
  std::vector<std::vector<Wave>> waves;

  double value(int k, int month, double y, double x, int h, int w) const {
    const double two_pi = 2.0 * std::numbers::pi;
    double z = offset[k] + season_amp[k] * std::sin(two_pi * month / 12.0 + season_phase[k]);
    for (const Wave& wv : waves[k]) {
      z += wv.amp * std::sin(two_pi * (wv.fx * x / w + wv.fy * y / h) + wv.phase + wv.drift * month);
    }
    return z;
  }
};

// Fixed per-bandset mixing rows: loadings onto the latent channels plus a
// per-band offset. Channel 0 carries a shared loading so modalities agree.
struct Mixing {
  std::vector<std::vector<double>> rows;  // [band][channel]
  std::vector<double> bias;
};

std::vector<Mixing> build_mixing(const GeneratorConfig& cfg) {
  std::vector<Mixing> out;
  for (std::size_t b = 0; b < cfg.registry.num_bandsets(); ++b) {
    const auto& info = cfg.registry.bandset(b);
    Rng rng = make_rng(cfg.mixing_seed, "mixing", {b});
    Mixing mx;
    for (int i = 0; i < info.spec.band_count; ++i) {
      std::vector<double> row(static_cast<std::size_t>(cfg.latent_channels));
      for (int k = 0; k < cfg.latent_channels; ++k) row[k] = normal01(rng) * (k == 0 ? 0.5 : 1.0);
      if (cfg.latent_channels > 0) row[0] += (uniform01(rng) < 0.5 ? -1.0 : 1.0);
      mx.rows.push_back(std::move(row));
      mx.bias.push_back(normal01(rng));
    }
    out.push_back(std::move(mx));
  }
  return out;
}

double class_threshold(int c, int num_classes) {
  // evenly spaced bin edges over the offset range [-2, 2] of channel 0
  return -2.0 + 4.0 * static_cast<double>(c) / num_classes;
}

int quantize(double z, int num_classes) {
  int cls = 0;
  while (cls + 1 < num_classes && z >= class_threshold(cls + 1, num_classes)) ++cls;
  return cls;
}

void check_config(const GeneratorConfig& cfg) {
  if (cfg.registry.modalities().empty()) throw std::invalid_argument("generator config has zero modalities");
  if (cfg.height <= 0 || cfg.width <= 0) throw std::invalid_argument("generator: height/width must be positive");
  if (cfg.min_timesteps < 1 || cfg.max_timesteps < cfg.min_timesteps || cfg.max_timesteps > 12) {
    throw std::invalid_argument("generator: timestep range must satisfy 1 <= min <= max <= 12");
  }
  if (cfg.latent_channels < 1) throw std::invalid_argument("generator: latent_channels must be >= 1");
  bool has_obs = false;
  for (const auto& m : cfg.registry.modalities()) has_obs = has_obs || m.kind == ModalityKind::Observation;
  if (!has_obs) throw std::invalid_argument("generator: registry needs at least one observation modality");
}

Sample synth_with_mixing(std::uint64_t seed, std::size_t index, const GeneratorConfig& cfg,
                         const std::vector<Mixing>& mixing) {
  Rng rng = make_rng(seed, "sample", {index});
  const int H = cfg.height;
  const int W = cfg.width;
  const int K = cfg.latent_channels;

  Sample s;
  s.location_id = static_cast<std::int64_t>(derive_seed(seed, "location", {index}) >> 1);

  const int T = uniform_int(rng, cfg.min_timesteps, cfg.max_timesteps);
  std::vector<int> months(12);
  for (int m = 0; m < 12; ++m) months[m] = m;
  for (int i = 11; i > 0; --i) std::swap(months[i], months[uniform_int(rng, 0, i)]);
  months.resize(static_cast<std::size_t>(T));
  std::sort(months.begin(), months.end());
  s.timestamps = months;

  LatentField field;
  for (int k = 0; k < K; ++k) {
    field.offset.push_back(k == 0 ? -2.0 + 4.0 * uniform01(rng) : normal01(rng));
    field.season_amp.push_back(0.3 * uniform01(rng));
    field.season_phase.push_back(2.0 * std::numbers::pi * uniform01(rng));
    std::vector<Wave> waves;
    for (int j = 0; j < 3; ++j) {
      Wave wv;
      wv.amp = 0.2 + 0.4 * uniform01(rng);
      wv.fx = (0.25 + 1.25 * uniform01(rng)) * (uniform01(rng) < 0.5 ? -1 : 1);
      wv.fy = (0.25 + 1.25 * uniform01(rng)) * (uniform01(rng) < 0.5 ? -1 : 1);
      wv.phase = 2.0 * std::numbers::pi * uniform01(rng);
      wv.drift = 0.5 * (uniform01(rng) - 0.5);
      waves.push_back(wv);
    }
    field.waves.push_back(std::move(waves));
  }

  // Presence per modality and timestep; at least one observation modality
  // keeps at least one timestep.
  const auto& mods = cfg.registry.modalities();
  std::vector<std::vector<std::uint8_t>> presence(mods.size());
  bool any_obs = false;
  for (std::size_t m = 0; m < mods.size(); ++m) {
    const int steps = mods[m].temporal == Temporality::Static ? 1 : T;
    presence[m].assign(static_cast<std::size_t>(steps), 0);
    if (mods[m].kind == ModalityKind::Map) {
      presence[m].assign(presence[m].size(), 1);
      continue;
    }
    const bool dropped = uniform01(rng) < cfg.modality_drop_prob;
    for (int t = 0; t < steps; ++t) presence[m][t] = !dropped && uniform01(rng) < cfg.presence_prob;
    any_obs = any_obs || std::any_of(presence[m].begin(), presence[m].end(), [](auto p) { return p; });
  }
  if (!any_obs) {
    for (std::size_t m = 0; m < mods.size(); ++m) {
      if (mods[m].kind == ModalityKind::Observation) {
        presence[m].assign(presence[m].size(), 1);
        break;
      }
    }
  }

  // Latent values cached per (month, y, x, k).
  std::vector<double> z(static_cast<std::size_t>(T) * H * W * K);
  for (int t = 0; t < T; ++t) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        for (int k = 0; k < K; ++k) {
          z[((static_cast<std::size_t>(t) * H + y) * W + x) * K + k] =
              field.value(k, months[t], y + 0.5, x + 0.5, H, W);
        }
      }
    }
  }

  std::vector<int> class_counts;
  for (std::size_t b = 0; b < cfg.registry.num_bandsets(); ++b) {
    const auto& info = cfg.registry.bandset(b);
    const auto& mod = mods[info.modality_index];
    BandsetRaster r;
    r.bandset_id = info.spec.id;
    r.timesteps = mod.temporal == Temporality::Static ? 1 : T;
    r.height = H;
    r.width = W;
    r.bands = info.spec.band_count;
    r.values.assign(static_cast<std::size_t>(r.timesteps) * H * W * r.bands, 0.0);
    r.present = presence[info.modality_index];

    if (info.kind == ModalityKind::Map) {
      class_counts.assign(static_cast<std::size_t>(mod.num_classes), 0);
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          double acc = 0.0;
          for (int t = 0; t < T; ++t) acc += z[((static_cast<std::size_t>(t) * H + y) * W + x) * K];
          const int cls = quantize(acc / T, mod.num_classes);
          r.at(0, y, x, 0) = cls;
          ++class_counts[cls];
        }
      }
    } else {
      const Mixing& mx = mixing[b];
      for (int t = 0; t < r.timesteps; ++t) {
        // Nuisance draws are shared by all bandsets of a modality; derive them
        // from (modality, t) so every bandset sees the same value.
        Rng nrng = make_rng(seed, "nuisance", {index, info.modality_index, static_cast<std::uint64_t>(t)});
        const double haze = cfg.nuisance_scale * normal01(nrng);
        const double gain = std::exp(0.5 * cfg.nuisance_scale * normal01(nrng));
        if (!r.present[t]) continue;
        Rng pix = make_rng(seed, "noise", {index, b, static_cast<std::uint64_t>(t)});
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            const double* zz = &z[((static_cast<std::size_t>(t) * H + y) * W + x) * K];
            for (int i = 0; i < r.bands; ++i) {
              double v = mx.bias[i];
              for (int k = 0; k < K; ++k) v += mx.rows[i][k] * zz[k];
              v = gain * v + haze;
              if (cfg.noise_scale > 0.0) v += cfg.noise_scale * normal01(pix);
              r.at(t, y, x, i) = v;
            }
          }
        }
      }
    }
    s.rasters.push_back(std::move(r));
  }
  if (!class_counts.empty()) {
    s.label = static_cast<int>(std::max_element(class_counts.begin(), class_counts.end()) - class_counts.begin());
  }
  return s;
}

}  // namespace

Sample synth_sample(std::uint64_t seed, std::size_t index, const GeneratorConfig& config) {
  check_config(config);
  return synth_with_mixing(seed, index, config, build_mixing(config));
}

std::vector<Sample> synth_generate(std::uint64_t seed, std::size_t n, const GeneratorConfig& config) {
  check_config(config);
  const auto mixing = build_mixing(config);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_with_mixing(seed, i, config, mixing));
  return out;
}

std::uint64_t config_hash(const GeneratorConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << c.height << ',' << c.width << ',' << c.min_timesteps << ',' << c.max_timesteps << ','
     << c.latent_channels << ',' << c.noise_scale << ',' << c.nuisance_scale << ',' << c.presence_prob << ','
     << c.modality_drop_prob << ',' << c.mixing_seed;
  for (const auto& m : c.registry.modalities()) {
    os << '|' << m.id << ':' << to_string(m.kind) << ':' << to_string(m.temporal) << ':' << m.num_classes;
    for (const auto& b : m.bandsets) os << ';' << b.id << '=' << b.band_count;
  }
  return fnv1a(os.str());
}

// ---------------------------------------------------------------------------
// Normalisation

NormStats compute_stats(std::span<const Sample> samples, const Registry& registry, StatsProvenance provenance) {
  NormStats stats;
  stats.provenance = provenance;
  for (const auto& info : registry.bandsets()) {
    if (info.kind == ModalityKind::Map) continue;
    const int nb = info.spec.band_count;
    std::vector<double> sum(nb, 0.0);
    std::vector<std::size_t> count(nb, 0);
    for (const Sample& s : samples) {
      const BandsetRaster* r = s.find(info.spec.id);
      if (!r) continue;
      for (int t = 0; t < r->timesteps; ++t) {
        if (!r->present[t]) continue;
        for (int y = 0; y < r->height; ++y)
          for (int x = 0; x < r->width; ++x)
            for (int b = 0; b < nb; ++b) {
              sum[b] += r->at(t, y, x, b);
              ++count[b];
            }
      }
    }
    std::vector<double> mean(nb);
    for (int b = 0; b < nb; ++b) {
      if (count[b] == 0) {
        throw std::invalid_argument("compute_stats: bandset '" + info.spec.id + "' has no present pixels");
      }
      mean[b] = sum[b] / static_cast<double>(count[b]);
    }
    // second pass for a numerically clean variance
    std::vector<double> sq(nb, 0.0);
    for (const Sample& s : samples) {
      const BandsetRaster* r = s.find(info.spec.id);
      if (!r) continue;
      for (int t = 0; t < r->timesteps; ++t) {
        if (!r->present[t]) continue;
        for (int y = 0; y < r->height; ++y)
          for (int x = 0; x < r->width; ++x)
            for (int b = 0; b < nb; ++b) {
              const double d = r->at(t, y, x, b) - mean[b];
              sq[b] += d * d;
            }
      }
    }
    auto& out = stats.bands[info.spec.id];
    for (int b = 0; b < nb; ++b) {
      BandStat st;
      st.mean = mean[b];
      st.std = std::sqrt(sq[b] / static_cast<double>(count[b]));
      if (!(st.std > NormStats::kMinStd)) {
        st.std = NormStats::kMinStd;
        st.clamped = true;
      }
      out.push_back(st);
    }
  }
  return stats;
}

Sample normalize(const Sample& sample, const NormStats& stats, const Registry& registry) {
  Sample out = sample;
  for (BandsetRaster& r : out.rasters) {
    const auto idx = registry.find_bandset(r.bandset_id);
    if (!idx || registry.bandset(*idx).kind == ModalityKind::Map) continue;
    auto it = stats.bands.find(r.bandset_id);
    if (it == stats.bands.end() || static_cast<int>(it->second.size()) != r.bands) {
      throw std::invalid_argument("normalize: missing band stats for '" + r.bandset_id + "'");
    }
    const auto& bs = it->second;
    for (int t = 0; t < r.timesteps; ++t) {
      if (!r.present[t]) continue;
      for (int y = 0; y < r.height; ++y)
        for (int x = 0; x < r.width; ++x)
          for (int b = 0; b < r.bands; ++b) {
            double& v = r.at(t, y, x, b);
            v = (v - bs[b].mean) / bs[b].std;
          }
    }
  }
  return out;
}

std::vector<Sample> normalize(std::span<const Sample> samples, const NormStats& stats, const Registry& registry) {
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(normalize(s, stats, registry));
  return out;
}

// ---------------------------------------------------------------------------
// Validation

std::vector<std::string> validate_sample(const Sample& s, const Registry& registry, const ValidationOptions& opt) {
  std::vector<std::string> v;
  const int T = static_cast<int>(s.timestamps.size());
  int ref_h = -1;
  int ref_w = -1;
  bool has_timeseries = false;
  for (const BandsetRaster& r : s.rasters) {
    const auto idx = registry.find_bandset(r.bandset_id);
    if (!idx) {
      v.push_back("unknown bandset '" + r.bandset_id + "'");
      continue;
    }
    const auto& info = registry.bandset(*idx);
    const std::string tag = "bandset '" + r.bandset_id + "': ";
    if (r.bands != info.spec.band_count) v.push_back(tag + "band count " + std::to_string(r.bands));
    if (r.values.size() != static_cast<std::size_t>(r.timesteps) * r.height * r.width * r.bands) {
      v.push_back(tag + "raster size does not match its shape");
    }
    if (r.present.size() != static_cast<std::size_t>(r.timesteps)) v.push_back(tag + "presence length mismatch");
    if (info.temporal == Temporality::TimeSeries) {
      has_timeseries = true;
      if (r.timesteps != T) v.push_back(tag + "timesteps differ from timestamp count");
    } else if (r.timesteps != 1) {
      v.push_back(tag + "static modality must have exactly one timestep");
    }
    if (ref_h < 0) {
      ref_h = r.height;
      ref_w = r.width;
    } else if (r.height != ref_h || r.width != ref_w) {
      v.push_back(tag + "alignment: spatial size differs from other bandsets");
    }
    if (opt.patch_size > 0 && (r.height % opt.patch_size != 0 || r.width % opt.patch_size != 0)) {
      v.push_back(tag + "height/width not divisible by patch size " + std::to_string(opt.patch_size));
    }
    if (info.kind == ModalityKind::Map) {
      const int C = registry.modalities()[info.modality_index].num_classes;
      for (double c : r.values) {
        if (c < 0 || c >= C || c != std::floor(c)) {
          v.push_back(tag + "class id outside [0, " + std::to_string(C) + ")");
          break;
        }
      }
    }
  }
  if (has_timeseries && (T < opt.min_timesteps || T > opt.max_timesteps)) {
    v.push_back("timesteps out of range: " + std::to_string(T) + " not in [" + std::to_string(opt.min_timesteps) +
                ", " + std::to_string(opt.max_timesteps) + "]");
  }
  for (int m : s.timestamps) {
    if (m < 0 || m > 11) {
      v.push_back("timestamp month " + std::to_string(m) + " outside 0..11");
      break;
    }
  }
  return v;
}

}  // namespace lmlite::data
