#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowdpt/ndgrad/adam.hpp"
#include "flowdpt/ndgrad/parameters.hpp"

// Checkpoint layout: a JSON manifest listing every tensor (name, shape,
// dtype, byte offset) and a sibling binary blob of little-endian float64
// values in manifest order. The blob path is the manifest path with its
// extension replaced by ".bin".
namespace flowdpt::nd {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  Array value;
};

struct CheckpointContents {
  nlohmann::json metadata;
  std::vector<NamedArray> params;
  std::optional<std::int64_t> adam_step;
  std::vector<Array> adam_m;  // aligned with params when adam_step is set
  std::vector<Array> adam_v;
};

std::filesystem::path checkpoint_blob_path(const std::filesystem::path& manifest);

void save_checkpoint(const std::filesystem::path& manifest, const ParameterStore& params,
                     const AdamState* adam, const nlohmann::json& metadata);
CheckpointContents read_checkpoint(const std::filesystem::path& manifest);

// Copies values by name; names and shapes must match the store exactly.
void load_parameters(ParameterStore& params, const CheckpointContents& ckpt);
// Optimizer state aligned with the store; fresh zero state if none was saved.
AdamState load_adam_state(const ParameterStore& params, const CheckpointContents& ckpt);

}  // namespace flowdpt::nd
