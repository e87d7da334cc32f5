// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>
#include "lmlite/datamodel.hpp"
#include "lmlite/rng.hpp"

namespace lmlite::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "raster files are written as native little-endian");

std::string sample_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%06zu", i);
  return buf;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DatasetError("cannot write " + p.string());
  f << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DatasetError("cannot read " + p.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace

DatasetManifest write_dataset(const fs::path& dir, std::span<const Sample> samples, std::uint64_t seed,
                              const GeneratorConfig& config) {
  fs::create_directories(dir);
  std::uint64_t content = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    json side;
    side["schema_version"] = kDatasetSchemaVersion;
    side["location_id"] = s.location_id;
    side["label"] = s.label ? json(*s.label) : json(nullptr);
    side["timestamps"] = s.timestamps;
    json rasters = json::array();
    std::size_t offset = 0;
    std::string blob;
    for (const BandsetRaster& r : s.rasters) {
      rasters.push_back({{"bandset", r.bandset_id},
                         {"timesteps", r.timesteps},
                         {"height", r.height},
                         {"width", r.width},
                         {"bands", r.bands},
                         {"present", std::vector<int>(r.present.begin(), r.present.end())},
                         {"offset", offset},
                         {"count", r.values.size()}});
      blob.append(reinterpret_cast<const char*>(r.values.data()), r.values.size() * sizeof(double));
      offset += r.values.size();
    }
    side["rasters"] = rasters;
    const std::string text = side.dump(1);
    write_text(dir / (sample_stem(i) + ".json"), text);
    write_text(dir / (sample_stem(i) + ".bin"), blob);
    content = fnv1a(text, content);
    content = fnv1a(blob, content);
  }

  DatasetManifest m;
  m.seed = seed;
  m.count = samples.size();
  m.generator_hash = config_hash(config);
  m.content_hash = content;
  for (const auto& b : config.registry.bandsets()) m.bandsets.push_back(b.spec.id);

  json mj;
  mj["schema_version"] = m.schema_version;
  mj["seed"] = m.seed;
  mj["count"] = m.count;
  mj["generator_hash"] = hex64(m.generator_hash);
  mj["content_hash"] = hex64(m.content_hash);
  mj["bandsets"] = m.bandsets;
  write_text(dir / "manifest.json", mj.dump(2) + "\n");
  return m;
}

DatasetManifest read_manifest(const fs::path& dir) {
  const fs::path p = dir / "manifest.json";
  if (!fs::exists(p)) throw DatasetError("no manifest.json in " + dir.string());
  json mj;
  try {
    mj = json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw DatasetError("malformed manifest " + p.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.schema_version = mj.at("schema_version").get<int>();
  if (m.schema_version != kDatasetSchemaVersion) {
    throw DatasetError("unsupported dataset schema_version " + std::to_string(m.schema_version));
  }
  m.seed = mj.at("seed").get<std::uint64_t>();
  m.count = mj.at("count").get<std::size_t>();
  m.generator_hash = parse_hex64(mj.at("generator_hash").get<std::string>());
  m.content_hash = parse_hex64(mj.at("content_hash").get<std::string>());
  m.bandsets = mj.at("bandsets").get<std::vector<std::string>>();
  return m;
}

std::vector<Sample> read_dataset(const fs::path& dir, DatasetManifest* manifest_out) {
  const DatasetManifest m = read_manifest(dir);
  std::vector<Sample> out;
  out.reserve(m.count);
  for (std::size_t i = 0; i < m.count; ++i) {
    const fs::path jp = dir / (sample_stem(i) + ".json");
    const std::string blob = read_text(dir / (sample_stem(i) + ".bin"));
    json side;
    try {
      side = json::parse(read_text(jp));
    } catch (const json::exception& e) {
      throw DatasetError("malformed sidecar " + jp.string() + ": " + e.what());
    }
    if (side.at("schema_version").get<int>() != kDatasetSchemaVersion) {
      throw DatasetError("sidecar schema_version mismatch in " + jp.string());
    }
    Sample s;
    s.location_id = side.at("location_id").get<std::int64_t>();
    if (!side.at("label").is_null()) s.label = side.at("label").get<int>();
    s.timestamps = side.at("timestamps").get<std::vector<int>>();
    for (const auto& rj : side.at("rasters")) {
      BandsetRaster r;
      r.bandset_id = rj.at("bandset").get<std::string>();
      r.timesteps = rj.at("timesteps").get<int>();
      r.height = rj.at("height").get<int>();
      r.width = rj.at("width").get<int>();
      r.bands = rj.at("bands").get<int>();
      for (int p : rj.at("present").get<std::vector<int>>()) r.present.push_back(static_cast<std::uint8_t>(p != 0));
      const auto offset = rj.at("offset").get<std::size_t>();
      const auto count = rj.at("count").get<std::size_t>();
      if ((offset + count) * sizeof(double) > blob.size()) {
        throw DatasetError("raster '" + r.bandset_id + "' overruns " + sample_stem(i) + ".bin");
      }
      r.values.resize(count);
      std::memcpy(r.values.data(), blob.data() + offset * sizeof(double), count * sizeof(double));
      s.rasters.push_back(std::move(r));
    }
    out.push_back(std::move(s));
  }
  if (manifest_out) *manifest_out = m;
  return out;
}

}  // namespace lmlite::data
