// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lmlite/model.hpp"
#include "lmlite/rng.hpp"

namespace lmlite::model {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoints are written as native little-endian");

constexpr char kMagic[8] = {'L', 'M', 'L', 'C', 'K', 'P', 'T', '1'};

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

template <typename T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw CheckpointError("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof v);
  pos += sizeof v;
  return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json index = json::array();
  std::string payload;
  for (const auto& [name, a] : ckpt.arrays) {
    index.push_back({{"name", name}, {"shape", a.shape}, {"offset", payload.size() / sizeof(double)}});
    payload.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * sizeof(double));
  }
  json header;
  header["format_version"] = kCheckpointVersion;
  header["step"] = ckpt.step;
  header["seed"] = ckpt.seed;
  header["frozen_hash"] = hex64(ckpt.frozen_hash);
  header["payload_hash"] = hex64(fnv1a(payload));
  header["config"] = ckpt.config_text;
  header["arrays"] = index;
  const std::string htext = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, htext.size());
  out += htext;
  out += payload;

  // Write-then-rename so an interrupted run never leaves a torn checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  const std::string in = os.str();
  if (in.size() < sizeof kMagic || std::memcmp(in.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(path.string() + " is not an lmlite checkpoint");
  }
  std::size_t pos = sizeof kMagic;
  const auto version = take<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto hlen = take<std::uint64_t>(in, pos);
  if (pos + hlen > in.size()) throw CheckpointError("checkpoint header truncated");
  json header;
  try {
    header = json::parse(in.substr(pos, hlen));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  pos += hlen;
  const std::string payload = in.substr(pos);
  if (hex64(fnv1a(payload)) != header.at("payload_hash").get<std::string>()) {
    throw CheckpointError("checkpoint payload hash mismatch in " + path.string());
  }

  Checkpoint c;
  c.step = header.at("step").get<std::uint64_t>();
  c.seed = header.at("seed").get<std::uint64_t>();
  c.frozen_hash = std::stoull(header.at("frozen_hash").get<std::string>(), nullptr, 16);
  c.config_text = header.at("config").get<std::string>();
  for (const auto& e : header.at("arrays")) {
    Array a(e.at("shape").get<ad::Shape>());
    const auto offset = e.at("offset").get<std::size_t>();
    if ((offset + a.size()) * sizeof(double) > payload.size()) {
      throw CheckpointError("array '" + e.at("name").get<std::string>() + "' overruns the payload");
    }
    std::memcpy(a.data.data(), payload.data() + offset * sizeof(double), a.size() * sizeof(double));
    c.arrays.emplace(e.at("name").get<std::string>(), std::move(a));
  }
  return c;
}

void store_params(Checkpoint& ckpt, const ModelParams& params) {
  for (const auto& [n, a] : params.learned) ckpt.arrays["param/" + n] = a;
  for (const auto& [n, a] : params.frozen) ckpt.arrays["frozen/" + n] = a;
  for (const auto& [n, a] : params.ema) ckpt.arrays["ema/" + n] = a;
  ckpt.frozen_hash = hash_arrays(params.frozen);
}

ModelParams load_params(const Checkpoint& ckpt) {
  ModelParams p;
  for (const auto& [n, a] : ckpt.arrays) {
    if (n.starts_with("param/")) p.learned[n.substr(6)] = a;
    else if (n.starts_with("frozen/")) p.frozen[n.substr(7)] = a;
    else if (n.starts_with("ema/")) p.ema[n.substr(4)] = a;
  }
  if (hash_arrays(p.frozen) != ckpt.frozen_hash) {
    throw CheckpointError("frozen target projection hash does not match the checkpoint record");
  }
  return p;
}

}  // namespace lmlite::model
