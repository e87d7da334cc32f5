// SPDX-License-Identifier: Apache-2.0
#include "lmlite/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace lmlite::tok {

using data::ModalityKind;
using data::Temporality;

void validate(const TokenizerConfig& c) {
  if (c.base_patch_size < 1) throw std::invalid_argument("tokenizer: base_patch_size must be >= 1");
  if (c.min_patch_size < 1 || c.max_patch_size < c.min_patch_size) {
    throw std::invalid_argument("tokenizer: invalid effective patch size range");
  }
  if (c.min_crop < 1 || c.max_crop < c.min_crop) throw std::invalid_argument("tokenizer: invalid crop range");
  if (c.min_timesteps < 0 || (c.max_timesteps > 0 && c.max_timesteps < c.min_timesteps)) {
    throw std::invalid_argument("tokenizer: invalid timestep window range");
  }
  if (c.model_dim < 4 || c.model_dim % 4 != 0) throw std::invalid_argument("tokenizer: model_dim must be a positive multiple of 4");
}

namespace {

int sample_height(const data::Sample& s) { return s.rasters.empty() ? 0 : s.rasters.front().height; }
int sample_width(const data::Sample& s) { return s.rasters.empty() ? 0 : s.rasters.front().width; }

void sincos_1d(int dim, double pos, double* out) {
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / half);
    out[i] = std::sin(pos * omega);
    out[half + i] = std::cos(pos * omega);
  }
}

}  // namespace

SampleDraw draw_layout(const data::Sample& sample, const TokenizerConfig& config, Rng& rng) {
  const int H = sample_height(sample);
  const int W = sample_width(sample);
  std::vector<int> sizes;
  for (int p = config.min_patch_size; p <= config.max_patch_size; ++p) {
    if (H % p == 0 && W % p == 0) sizes.push_back(p);
  }
  if (sizes.empty()) throw std::invalid_argument("draw_layout: no effective patch size in range divides the raster");
  SampleDraw d;
  d.patch_size = sizes[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(sizes.size()) - 1))];
  const int grid = std::min(H, W) / d.patch_size;
  d.crop_side = uniform_int(rng, config.min_crop, config.max_crop);
  if (d.crop_side > grid) {
    d.crop_side = grid;
    d.crop_clamped = true;
  }
  d.row0 = uniform_int(rng, 0, H / d.patch_size - d.crop_side);
  d.col0 = uniform_int(rng, 0, W / d.patch_size - d.crop_side);
  const int T = static_cast<int>(sample.timestamps.size());
  if (config.max_timesteps > 0 && T > 0) {
    const int hi = std::min(T, config.max_timesteps);
    const int lo = std::min(hi, std::max(1, config.min_timesteps));
    d.t_count = uniform_int(rng, lo, hi);
    d.t_begin = uniform_int(rng, 0, T - d.t_count);
  }
  return d;
}

SampleDraw full_layout(const data::Sample& sample, int patch_size) {
  const int H = sample_height(sample);
  const int W = sample_width(sample);
  if (patch_size < 1 || H % patch_size != 0 || W % patch_size != 0) {
    throw std::invalid_argument("full_layout: patch size " + std::to_string(patch_size) + " does not divide raster");
  }
  if (H != W) throw std::invalid_argument("full_layout: square rasters only");
  SampleDraw d;
  d.patch_size = patch_size;
  d.crop_side = H / patch_size;
  return d;
}

Array encoded_plane(const data::BandsetRaster& r, const data::Registry::BandsetInfo& info, int t) {
  const int C = info.channels;
  Array out({static_cast<std::size_t>(r.height), static_cast<std::size_t>(r.width), static_cast<std::size_t>(C)});
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      double* px = &out.data[(static_cast<std::size_t>(y) * r.width + x) * C];
      if (info.kind == ModalityKind::Map) {
        const int cls = static_cast<int>(r.at(t, y, x, 0));
        if (cls < 0 || cls >= C) throw std::out_of_range("map class id out of range in '" + r.bandset_id + "'");
        px[cls] = 1.0;
      } else {
        for (int b = 0; b < C; ++b) px[b] = r.at(t, y, x, b);
      }
    }
  }
  return out;
}

Array flexi_patchify_region(const Array& raster, int patch_size, int p0, int row0, int col0, int side) {
  if (raster.rank() != 3) throw std::invalid_argument("flexi_patchify: raster must be [H, W, C]");
  const int H = static_cast<int>(raster.dim(0));
  const int W = static_cast<int>(raster.dim(1));
  const int C = static_cast<int>(raster.dim(2));
  if (patch_size < 1 || H % patch_size != 0 || W % patch_size != 0) {
    throw std::invalid_argument("flexi_patchify: H=" + std::to_string(H) + ", W=" + std::to_string(W) +
                                " not divisible by patch size " + std::to_string(patch_size));
  }
  if (row0 < 0 || col0 < 0 || side < 1 || row0 + side > H / patch_size || col0 + side > W / patch_size) {
    throw std::invalid_argument("flexi_patchify: crop window outside the token grid");
  }
  const double ratio = static_cast<double>(patch_size) / p0;  // source pixels per resized pixel
  const std::size_t pdim = static_cast<std::size_t>(p0) * p0 * C;
  Array out({static_cast<std::size_t>(side) * side, pdim});

  // Separable bilinear weights along each axis.
  auto coords = [&](int start, int extent, std::vector<int>& lo, std::vector<int>& hi, std::vector<double>& w) {
    const int n = side * p0;
    lo.resize(n);
    hi.resize(n);
    w.resize(n);
    for (int i = 0; i < n; ++i) {
      const int dst = start * p0 + i;
      double src = (dst + 0.5) * ratio - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(extent - 1));
      const int l = static_cast<int>(std::floor(src));
      lo[i] = l;
      hi[i] = std::min(l + 1, extent - 1);
      w[i] = src - l;
    }
  };
  std::vector<int> ylo, yhi, xlo, xhi;
  std::vector<double> wy, wx;
  coords(row0, H, ylo, yhi, wy);
  coords(col0, W, xlo, xhi, wx);

  const double* src = raster.data.data();
  for (int tr = 0; tr < side; ++tr) {
    for (int tc = 0; tc < side; ++tc) {
      double* patch = &out.data[(static_cast<std::size_t>(tr) * side + tc) * pdim];
      for (int py = 0; py < p0; ++py) {
        const int iy = tr * p0 + py;
        for (int px = 0; px < p0; ++px) {
          const int ix = tc * p0 + px;
          const double* a = src + (static_cast<std::size_t>(ylo[iy]) * W + xlo[ix]) * C;
          const double* b = src + (static_cast<std::size_t>(ylo[iy]) * W + xhi[ix]) * C;
          const double* c = src + (static_cast<std::size_t>(yhi[iy]) * W + xlo[ix]) * C;
          const double* d = src + (static_cast<std::size_t>(yhi[iy]) * W + xhi[ix]) * C;
          const double fy = wy[iy];
          const double fx = wx[ix];
          double* dst = patch + (static_cast<std::size_t>(py) * p0 + px) * C;
          for (int ch = 0; ch < C; ++ch) {
            const double top = a[ch] + fx * (b[ch] - a[ch]);
            const double bot = c[ch] + fx * (d[ch] - c[ch]);
            dst[ch] = top + fy * (bot - top);
          }
        }
      }
    }
  }
  return out;
}

Array flexi_patchify(const Array& raster, int patch_size, int base_patch_size) {
  if (raster.rank() != 3) throw std::invalid_argument("flexi_patchify: raster must be [H, W, C]");
  const int H = static_cast<int>(raster.dim(0));
  const int W = static_cast<int>(raster.dim(1));
  if (patch_size < 1 || H % patch_size != 0 || W % patch_size != 0) {
    throw std::invalid_argument("flexi_patchify: H=" + std::to_string(H) + ", W=" + std::to_string(W) +
                                " not divisible by patch size " + std::to_string(patch_size));
  }
  if (H != W) throw std::invalid_argument("flexi_patchify: square rasters only");
  return flexi_patchify_region(raster, patch_size, base_patch_size, 0, 0, H / patch_size);
}

ad::Var patch_project(ad::Var patches, ad::Var weight, ad::Var bias) {
  return ad::add(ad::matmul(patches, weight), bias);
}

Array pos_embed_2d_sincos(int dim, int rows, int cols) {
  if (dim <= 0 || dim % 4 != 0) throw std::invalid_argument("pos_embed_2d_sincos: dim must be divisible by 4");
  Array out({static_cast<std::size_t>(rows) * cols, static_cast<std::size_t>(dim)});
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double* row = &out.data[(static_cast<std::size_t>(r) * cols + c) * dim];
      sincos_1d(dim / 2, r, row);
      sincos_1d(dim / 2, c, row + dim / 2);
    }
  }
  return out;
}

std::vector<double> temporal_embed(int dim, int month) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("temporal_embed: dim must be even");
  std::vector<double> out(static_cast<std::size_t>(dim));
  sincos_1d(dim, month, out.data());
  return out;
}

TokenBatch assemble_tokens(std::span<const data::Sample> samples, std::span<const SampleDraw> draws,
                           const data::Registry& registry, const TokenizerConfig& config, bool include_maps) {
  validate(config);
  if (samples.size() != draws.size()) throw std::invalid_argument("assemble_tokens: one draw per sample required");
  const int D = config.model_dim;
  const int p0 = config.base_patch_size;

  TokenBatch batch;
  batch.raw_offsets.push_back(0);
  batch.sample_offsets.push_back(0);
  batch.draws.assign(draws.begin(), draws.end());
  std::vector<double> enc;
  std::vector<double> pos(static_cast<std::size_t>(D));

  for (std::size_t si = 0; si < samples.size(); ++si) {
    const data::Sample& s = samples[si];
    const SampleDraw& d = draws[si];
    const int T = static_cast<int>(s.timestamps.size());
    const int t_lo = d.t_count > 0 ? d.t_begin : 0;
    const int t_hi = d.t_count > 0 ? d.t_begin + d.t_count : T;
    for (std::size_t b = 0; b < registry.num_bandsets(); ++b) {
      const auto& info = registry.bandset(b);
      if (info.kind == ModalityKind::Map && !include_maps) continue;
      const data::BandsetRaster* r = s.find(info.spec.id);
      if (r == nullptr) continue;
      const bool is_static = info.temporal == Temporality::Static;
      const int lo = is_static ? 0 : t_lo;
      const int hi = is_static ? 1 : std::min(t_hi, r->timesteps);
      for (int t = lo; t < hi; ++t) {
        if (!r->present[t]) continue;
        const Array plane = encoded_plane(*r, info, t);
        const Array patches = flexi_patchify_region(plane, d.patch_size, p0, d.row0, d.col0, d.crop_side);
        const std::vector<double> temb = is_static ? std::vector<double>(static_cast<std::size_t>(D), 0.0)
                                                   : temporal_embed(D, s.timestamps[t]);
        const std::size_t pdim = patches.dim(1);
        for (int i = 0; i < d.crop_side * d.crop_side; ++i) {
          TokenMeta m;
          m.sample = static_cast<std::uint32_t>(si);
          m.bandset = static_cast<std::uint32_t>(b);
          m.modality = static_cast<std::uint32_t>(info.modality_index);
          m.t = is_static ? 0 : t;
          m.month = is_static ? 0 : s.timestamps[t];
          m.is_static = is_static;
          m.row = d.row0 + i / d.crop_side;
          m.col = d.col0 + i % d.crop_side;
          batch.metas.push_back(m);
          batch.raw_data.insert(batch.raw_data.end(), patches.data.begin() + static_cast<std::ptrdiff_t>(i * pdim),
                                patches.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * pdim));
          batch.raw_offsets.push_back(batch.raw_data.size());
          sincos_1d(D / 2, m.row, pos.data());
          sincos_1d(D / 2, m.col, pos.data() + D / 2);
          for (int k = 0; k < D; ++k) enc.push_back(pos[k] + temb[k]);
        }
      }
    }
    batch.sample_offsets.push_back(batch.metas.size());
  }
  batch.encodings = Array({batch.metas.size(), static_cast<std::size_t>(D)}, std::move(enc));
  return batch;
}

}  // namespace lmlite::tok
