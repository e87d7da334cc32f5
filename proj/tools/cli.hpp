// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "lmlite/config.hpp"
#include "lmlite/eval.hpp"

namespace lmlite::cli {

namespace fs = std::filesystem;

inline constexpr const char* kOutRootEnv = "LMLITE_OUT_ROOT";

/// $LMLITE_OUT_ROOT, else ./runs.
fs::path default_out_root();

/// Failure the user can fix (bad flags, refusals, invalid configs); exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses argv-style arguments (without the program name) and runs one
/// subcommand. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Checkpoint plus the run config it was trained with.
struct LoadedEncoder {
  eval::Encoder encoder;
  config::RunConfig config;
  std::uint64_t step = 0;
  std::uint64_t frozen_hash = 0;
};

LoadedEncoder load_encoder(const fs::path& checkpoint);

/// mode: knn | lp | finetune. Sweeps pooling and normalization for the frozen
/// modes; knn and lp refuse segmentation tasks.
eval::EvalReport evaluate(const LoadedEncoder& enc, const config::RunConfig& cfg, const eval::TaskData& task,
                          const std::string& mode, const std::string& model_name);

}  // namespace lmlite::cli
