// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lmlite/autodiff.hpp"
#include "lmlite/datamodel.hpp"
#include "lmlite/rng.hpp"

namespace lmlite::tok {

using ad::Array;

struct TokenizerConfig {
  int base_patch_size = 8;  // p0; projection weights are sized for p0 x p0 patches
  int min_patch_size = 1;   // effective patch size range, inclusive
  int max_patch_size = 8;
  int min_crop = 1;  // square crop side in tokens, inclusive
  int max_crop = 12;
  int min_timesteps = 3;  // temporal window drawn per sample; 0 = keep all
  int max_timesteps = 12;
  int model_dim = 64;
};

void validate(const TokenizerConfig& c);

struct TokenMeta {
  std::uint32_t sample = 0;
  std::uint32_t bandset = 0;   // registry bandset index
  std::uint32_t modality = 0;  // registry modality index
  int t = 0;                   // timestep index in the sample (0 for static)
  int month = 0;
  bool is_static = false;
  int row = 0;  // token grid coordinates at the sample's effective patch size
  int col = 0;

  friend bool operator==(const TokenMeta&, const TokenMeta&) = default;
};

/// Per-sample random choices, drawn once and shared across modalities.
struct SampleDraw {
  int patch_size = 8;
  int crop_side = 1;
  int row0 = 0;
  int col0 = 0;
  int t_begin = 0;
  int t_count = 0;  // 0 = all timesteps
  bool crop_clamped = false;
};

SampleDraw draw_layout(const data::Sample& sample, const TokenizerConfig& config, Rng& rng);
/// Whole token grid at a fixed patch size over every timestep (evaluation).
SampleDraw full_layout(const data::Sample& sample, int patch_size);

struct TokenBatch {
  Array embeddings;  // [N, model_dim]; only filled by model::assemble_tokens
  std::vector<TokenMeta> metas;
  std::vector<double> raw_data;           // concatenated raw patches
  std::vector<std::size_t> raw_offsets;   // N + 1 offsets into raw_data
  Array encodings;                        // [N, model_dim] positional + temporal
  std::vector<std::size_t> sample_offsets;  // B + 1 boundaries partitioning [0, N)
  std::vector<SampleDraw> draws;

  std::size_t size() const { return metas.size(); }
  std::size_t num_samples() const { return sample_offsets.empty() ? 0 : sample_offsets.size() - 1; }
  std::span<const double> raw_patch(std::size_t i) const {
    return {raw_data.data() + raw_offsets[i], raw_offsets[i + 1] - raw_offsets[i]};
  }
};

/// Encoded plane [H, W, C] of one timestep; maps are expanded to one-hot.
Array encoded_plane(const data::BandsetRaster& raster, const data::Registry::BandsetInfo& info, int t);

/// Resize an [H, W, C] raster by p0 / p_eff (bilinear, half-pixel centres)
/// and cut it into p0 x p0 patches. Output is [(H/p_eff)*(W/p_eff), p0*p0*C].
Array flexi_patchify(const Array& raster, int patch_size, int base_patch_size);
/// Same as flexi_patchify restricted to a square window of the token grid.
Array flexi_patchify_region(const Array& raster, int patch_size, int base_patch_size, int row0, int col0,
                            int side);

/// patches [n, p] x weight [p, d] + bias [d].
ad::Var patch_project(ad::Var patches, ad::Var weight, ad::Var bias);

Array pos_embed_2d_sincos(int dim, int rows, int cols);
std::vector<double> temporal_embed(int dim, int month);

/// Tokens (metas, raw patches, fixed encodings) for a batch of samples.
/// Learned projections are applied later inside a graph.
TokenBatch assemble_tokens(std::span<const data::Sample> samples, std::span<const SampleDraw> draws,
                           const data::Registry& registry, const TokenizerConfig& config, bool include_maps);

}  // namespace lmlite::tok
