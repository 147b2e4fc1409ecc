#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>

#include "cli/run_config.hpp"
#include "flowdpt/envsuite.hpp"

namespace flowdpt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

// Collects a CND shard for every registry task into dataset_dir.
int cmd_collect(const RunConfig& cfg);

// Trains on the train-split shards and writes the checkpoint, loss.csv and
// loss.svg. With resume, continues from the existing checkpoint's step.
int cmd_train(const RunConfig& cfg, bool resume);

// Rolls out every task of the configured splits for every eval seed and
// writes scores.csv and returns.csv. prompt_size overrides the config.
int cmd_eval(const RunConfig& cfg, runtime::Mode mode, std::optional<std::size_t> prompt_size);

// Demonstration sweep (sweep.csv) and posterior contraction
// (contraction.csv, contraction.svg).
int cmd_analyze(const RunConfig& cfg);

struct RegistrySpec {
  env::TaskKind kind = env::TaskKind::goal_bandit;
  std::size_t n_train = 64;
  std::size_t n_test = 16;
  std::size_t act_dim = 2;
  std::string group;  // default: the kind name
  std::uint64_t seed = 0;
};

// Writes a registry of random bandit goals, or of random stabilizable
// linear systems for linear_control (state dim 2, action dim 1).
int cmd_registry(const std::filesystem::path& out, const RegistrySpec& spec);

}  // namespace flowdpt::cli
