#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowdpt/datagen.hpp"
#include "flowdpt/flowhead.hpp"
#include "flowdpt/rng.hpp"
#include "flowdpt/runtime.hpp"

namespace flowdpt::cli {

// Bad flags, unreadable or invalid configuration: exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalSettings {
  runtime::Mode mode = runtime::Mode::online;
  std::size_t episodes = 50;
  std::size_t final_window = 10;  // online raw score = mean of the last episodes
  std::size_t prompt_size = 100;  // offline only
  std::size_t context_len = 0;    // online buffer capacity; 0 = model limit
  bool reset_context = false;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3};
  std::vector<std::string> splits{"train", "test"};
  std::size_t baseline_episodes = 1000;
  flow::FlowConfig flow;
};

struct AnalyzeSettings {
  std::vector<std::size_t> prompt_sizes{0, 5, 25, 100};
  std::vector<std::size_t> contraction_sizes{0, 10, 100, 500};
  std::size_t n_samples = 100;
  std::size_t episodes = 10;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3};
  std::string task;  // contraction task id; empty = first test task
};

struct RunConfig {
  std::filesystem::path registry;
  std::filesystem::path dataset_dir;
  std::filesystem::path checkpoint;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  data::NoiseSchedule collect;
  runtime::ModelConfig model;  // groups are filled from the dataset at train time
  runtime::TrainerConfig train;
  EvalSettings eval;
  AnalyzeSettings analyze;

  // Named child stream of the run seed: collect, init, train, eval, analyze.
  Rng stream(const char* name) const { return Rng(seed).stream(name); }
};

// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON
// when possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Builds a run config from a JSON document. Relative paths resolve against
// base_dir; FLOWDPT_OUT, when set, replaces output_dir. Unset dataset and
// checkpoint paths default to <output_dir>/data and
// <output_dir>/model/checkpoint.json. Unknown keys are rejected.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);

// Reads a config file (or starts from defaults when path is empty), applies
// overrides and an optional seed, then parses.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed);

// Fully resolved config as JSON, recorded next to run outputs.
nlohmann::json to_json(const RunConfig& cfg);

}  // namespace flowdpt::cli
