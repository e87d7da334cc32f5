// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmlite/datamodel.hpp"
#include "lmlite/tokenizer.hpp"

namespace lmlite::mask {

enum class Category : std::uint8_t { NotSelected = 0, EncodeOnly = 1, DecodeOnly = 2, EncodeAndDecode = 3 };
inline constexpr std::size_t kNumCategories = 4;

std::string to_string(Category c);

enum class MaskingMode { ModalityAware, UniformRandom };
std::string to_string(MaskingMode m);
MaskingMode masking_mode_from_string(const std::string& s);

struct MaskConfig {
  double mask_ratio = 0.5;  // fraction of tokens masked inside Encode* bandsets
  // Indexed by Category.
  std::array<double, kNumCategories> observation_probs{0.1, 0.2, 0.2, 0.5};
  std::array<double, kNumCategories> map_probs{0.5, 0.0, 0.5, 0.0};
  int min_encoded = 1;
  int min_decoded = 1;
  int max_retries = 32;
  MaskingMode mode = MaskingMode::ModalityAware;
};

void validate(const MaskConfig& c);
std::string describe(const MaskConfig& c);

class MaskingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MaskPlan {
  int view_id = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<Category>> categories;  // [sample][bandset]
  std::vector<std::vector<std::uint32_t>> tokens_per_bandset;  // [sample][bandset]
  std::vector<std::uint8_t> visible;              // per token: input to encoder
  std::vector<std::uint8_t> target;               // per token: decoder target
  int retries = 0;                                // rejected draws over all samples

  friend bool operator==(const MaskPlan&, const MaskPlan&) = default;
};

/// Draws one view's plan. Per sample, categories are resampled until at least
/// min_encoded bandsets contribute visible tokens and min_decoded contribute
/// targets. Map bandsets only ever draw DecodeOnly or NotSelected.
MaskPlan sample_mask_plan(const tok::TokenBatch& batch, const data::Registry& registry, const MaskConfig& config,
                          std::uint64_t seed, int view_id = 0);

/// Row indices into the token batch, grouped per sample.
struct MaskedBatch {
  std::vector<std::size_t> encoder_rows;
  std::vector<std::size_t> encoder_offsets;  // B + 1
  std::vector<std::size_t> target_rows;
  std::vector<std::size_t> target_offsets;  // B + 1

  std::vector<tok::TokenMeta> target_metas(const tok::TokenBatch& batch) const;
};

MaskedBatch apply_mask(const tok::TokenBatch& batch, const MaskPlan& plan);

struct PlanStatistics {
  std::size_t plans = 0;
  // [kind][category] counts over bandsets that had tokens; kind 0 =
  // observation, 1 = map
  std::array<std::array<std::size_t, kNumCategories>, 2> counts{};
  double mean_visible_fraction = 0.0;

  double frequency(data::ModalityKind kind, Category c) const;
};

PlanStatistics plan_statistics(std::span<const MaskPlan> plans, const data::Registry& registry);

/// Lists every violated plan invariant (empty when the plan is sound).
std::vector<std::string> check_plan(const tok::TokenBatch& batch, const MaskPlan& plan,
                                    const data::Registry& registry, const MaskConfig& config);

}  // namespace lmlite::mask
