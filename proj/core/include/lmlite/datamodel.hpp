// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lmlite::data {

enum class ModalityKind { Observation, Map };
enum class Temporality { Static, TimeSeries };

std::string to_string(ModalityKind k);
std::string to_string(Temporality t);

/// Group of bands captured at one native resolution; the unit of
/// tokenization, masking and negative sampling.
struct BandsetSpec {
  std::string id;
  std::string modality_id;
  int band_count = 1;
};

struct ModalitySpec {
  std::string id;
  ModalityKind kind = ModalityKind::Observation;
  Temporality temporal = Temporality::TimeSeries;
  std::vector<BandsetSpec> bandsets;
  int num_classes = 0;  // maps only: class ids are in [0, num_classes)
};

/// Flattened, indexed view of all modalities and bandsets.
class Registry {
 public:
  struct BandsetInfo {
    BandsetSpec spec;
    std::size_t modality_index = 0;
    ModalityKind kind = ModalityKind::Observation;
    Temporality temporal = Temporality::TimeSeries;
    // Channels seen by the patch projections: band_count for observations,
    // num_classes for one-hot maps.
    int channels = 1;
  };

  Registry() = default;
  explicit Registry(std::vector<ModalitySpec> modalities);

  /// Two-band S1-like, three-bandset S2-like, two-bandset L8-like
  /// observations plus a WorldCover-like class map.
  static Registry default_registry(int map_classes = 5);

  const std::vector<ModalitySpec>& modalities() const { return modalities_; }
  const std::vector<BandsetInfo>& bandsets() const { return bandsets_; }
  std::size_t num_bandsets() const { return bandsets_.size(); }
  std::size_t bandset_index(std::string_view id) const;
  std::optional<std::size_t> find_bandset(std::string_view id) const;
  const BandsetInfo& bandset(std::size_t i) const { return bandsets_.at(i); }

  Registry without_maps() const;
  bool has_maps() const;

 private:
  std::vector<ModalitySpec> modalities_;
  std::vector<BandsetInfo> bandsets_;
};

struct BandsetRaster {
  std::string bandset_id;
  int timesteps = 0;
  int height = 0;
  int width = 0;
  int bands = 0;
  std::vector<double> values;         // [t][y][x][band]
  std::vector<std::uint8_t> present;  // per timestep

  std::size_t index(int t, int y, int x, int b) const {
    return ((static_cast<std::size_t>(t) * height + y) * width + x) * bands + b;
  }
  double at(int t, int y, int x, int b) const { return values[index(t, y, x, b)]; }
  double& at(int t, int y, int x, int b) { return values[index(t, y, x, b)]; }
  bool any_present() const;
};

/// One multimodal spatio-temporal instance.
struct Sample {
  std::vector<BandsetRaster> rasters;
  std::vector<int> timestamps;  // month index per timestep
  std::optional<int> label;
  std::int64_t location_id = 0;

  const BandsetRaster* find(std::string_view bandset_id) const;
  BandsetRaster* find(std::string_view bandset_id);
  friend bool operator==(const Sample&, const Sample&) = default;
};

inline bool operator==(const BandsetRaster& a, const BandsetRaster& b) {
  return a.bandset_id == b.bandset_id && a.timesteps == b.timesteps && a.height == b.height &&
         a.width == b.width && a.bands == b.bands && a.values == b.values && a.present == b.present;
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct GeneratorConfig {
  Registry registry = Registry::default_registry();
  int height = 32;
  int width = 32;
  int min_timesteps = 4;
  int max_timesteps = 8;
  int latent_channels = 3;
  double noise_scale = 0.1;
  double nuisance_scale = 3.0;   // per-sample, per-modality, per-timestep haze and log-gain
  double presence_prob = 0.9;    // per modality-timestep
  double modality_drop_prob = 0.1;
  std::uint64_t mixing_seed = 7;  // fixes the bandset mixing matrices
};

/// Deterministic in (seed, n, config); sample i draws from its own sub-seed,
/// so any subset can be regenerated independently.
std::vector<Sample> synth_generate(std::uint64_t seed, std::size_t n, const GeneratorConfig& config);
Sample synth_sample(std::uint64_t seed, std::size_t index, const GeneratorConfig& config);

/// Stable hash of every generator setting, used in dataset manifests.
std::uint64_t config_hash(const GeneratorConfig& config);

// ---------------------------------------------------------------------------
// Normalisation

enum class StatsProvenance { Pretraining, EvalSet };
std::string to_string(StatsProvenance p);

struct BandStat {
  double mean = 0.0;
  double std = 1.0;
  bool clamped = false;  // zero variance; std forced to kMinStd
};

struct NormStats {
  static constexpr double kMinStd = 1e-6;
  StatsProvenance provenance = StatsProvenance::Pretraining;
  std::map<std::string, std::vector<BandStat>> bands;  // keyed by bandset id
};

/// Per-band population mean/std over all present pixels. Maps are skipped.
NormStats compute_stats(std::span<const Sample> samples, const Registry& registry,
                        StatsProvenance provenance);

/// (value - mean) / std per band on present timesteps. Maps and bandsets the
/// registry does not hold are left untouched.
Sample normalize(const Sample& sample, const NormStats& stats, const Registry& registry);
std::vector<Sample> normalize(std::span<const Sample> samples, const NormStats& stats,
                              const Registry& registry);

// ---------------------------------------------------------------------------
// Validation

struct ValidationOptions {
  int patch_size = 8;  // H and W must be divisible by this
  int min_timesteps = 3;
  int max_timesteps = 12;
};

/// Every violated invariant, empty when the sample is well formed.
std::vector<std::string> validate_sample(const Sample& sample, const Registry& registry,
                                         const ValidationOptions& options = {});

// ---------------------------------------------------------------------------
// On-disk dataset: manifest.json plus, per sample, a JSON sidecar and a flat
// little-endian float64 raster file.

inline constexpr int kDatasetSchemaVersion = 1;

struct DatasetManifest {
  int schema_version = kDatasetSchemaVersion;
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::uint64_t generator_hash = 0;
  std::uint64_t content_hash = 0;
  std::vector<std::string> bandsets;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

DatasetManifest write_dataset(const std::filesystem::path& dir, std::span<const Sample> samples,
                              std::uint64_t seed, const GeneratorConfig& config);
DatasetManifest read_manifest(const std::filesystem::path& dir);
std::vector<Sample> read_dataset(const std::filesystem::path& dir, DatasetManifest* manifest = nullptr);

}  // namespace lmlite::data
