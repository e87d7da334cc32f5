// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmlite/autodiff.hpp"
#include "lmlite/datamodel.hpp"
#include "lmlite/tokenizer.hpp"

namespace lmlite::model {

using ad::Array;
using ad::Graph;
using ad::Var;

/// Where reconstruction targets come from.
enum class TargetMode { Frozen, Ema, Pixel };
std::string to_string(TargetMode m);
TargetMode target_mode_from_string(const std::string& s);

struct EncoderConfig {
  int depth = 2;
  int dim = 64;
  int heads = 4;
  int mlp_ratio = 4;
};

struct DecoderConfig {
  int depth = 2;  // dim and heads follow the encoder
  bool query_self_attention = true;
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  int base_patch_size = 8;

  /// "desk" (2/64/4), "nano" (4/128/8), "tiny" (12/192/3), "base" (12/768/12),
  /// "large" (24/1024/16). Decoder depth is 2 for desk, 4 otherwise.
  static ModelConfig preset(const std::string& name);
};

void validate(const ModelConfig& c);

/// Closed-form counts. A pre-norm block holds 12 d^2 + 13 d weights at
/// mlp_ratio 4.
std::size_t encoder_block_param_count(int dim, int mlp_ratio);
std::size_t encoder_param_count(const EncoderConfig& c);  // blocks + final norm
std::size_t decoder_param_count(const ModelConfig& c);    // blocks + final norm + output head
/// Every learnable array created by init_params for this registry.
std::size_t learned_param_count(const ModelConfig& c, const data::Registry& registry, TargetMode mode);

struct ModelParams {
  std::map<std::string, Array> learned;  // updated by the optimizer
  std::map<std::string, Array> frozen;   // target projections, never updated
  std::map<std::string, Array> ema;      // EMA target encoder (TargetMode::Ema only)

  std::size_t learned_count() const;
  const Array& get(const std::string& name) const;
};

std::string frozen_weight_name(const std::string& bandset_id);
std::string frozen_bias_name(const std::string& bandset_id);

/// Learned weights use Xavier-uniform linears, unit layer-norm gains and
/// N(0, 0.02) embeddings; frozen target projections are N(0, 1/pixel_dim)
/// with zero bias. Patch projections exist for observation bandsets only
/// because map tokens never reach the encoder.
ModelParams init_params(const ModelConfig& config, const data::Registry& registry, std::uint64_t seed,
                        TargetMode mode = TargetMode::Frozen);

/// FNV-1a over names, shapes and raw bytes.
std::uint64_t hash_arrays(const std::map<std::string, Array>& arrays);

/// Graph leaves for a parameter map.
class ParamVars {
 public:
  ParamVars() = default;
  ParamVars(Graph& g, const std::map<std::string, Array>& arrays, bool requires_grad);

  Var operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  std::map<std::string, Var> vars_;
};

/// Patch projection + modality embedding + fixed encodings for the given
/// rows of a token batch, in row order. Output [rows, dim].
Var embed_tokens(Graph& g, const ParamVars& p, const tok::TokenBatch& batch, std::span<const std::size_t> rows,
                 const data::Registry& registry);

/// Decoder queries: MASK token + fixed encodings + modality embedding.
Var decoder_queries(Graph& g, const ParamVars& p, const tok::TokenBatch& batch, std::span<const std::size_t> rows);

/// x [N, dim] with per-sample row boundaries (B + 1 offsets). Attention never
/// crosses sample boundaries. Output is final-normed latents [N, dim].
Var encoder_forward(Graph& g, const ParamVars& p, const ModelConfig& config, Var x,
                    std::span<const std::size_t> offsets);

/// Queries [M, dim] cross-attend to the latents of their own sample.
Var decoder_forward(Graph& g, const ParamVars& p, const ModelConfig& config, Var latents,
                    std::span<const std::size_t> latent_offsets, Var queries,
                    std::span<const std::size_t> query_offsets);

/// Mean over each sample's latent rows -> [B, dim].
Var pool_instance(Var latents, std::span<const std::size_t> offsets);

/// Tokenizes and fills TokenBatch::embeddings with the current parameters.
tok::TokenBatch assemble_tokens(std::span<const data::Sample> samples, std::span<const tok::SampleDraw> draws,
                                const data::Registry& registry, const tok::TokenizerConfig& tokenizer,
                                const ModelParams& params, bool include_maps);

// ---------------------------------------------------------------------------
// Checkpoints: "LMLCKPT1", u32 format version, u64 header length, JSON header,
// then little-endian float64 arrays in header order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string config_text;  // effective run config
  std::uint64_t step = 0;
  std::uint64_t seed = 0;   // every random stream derives from (seed, step)
  std::uint64_t frozen_hash = 0;
  std::map<std::string, Array> arrays;  // prefixed: param/, frozen/, ema/, adam_m/, adam_v/, norm/
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Pack/unpack helpers for the param/, frozen/ and ema/ prefixes.
void store_params(Checkpoint& ckpt, const ModelParams& params);
ModelParams load_params(const Checkpoint& ckpt);

}  // namespace lmlite::model
