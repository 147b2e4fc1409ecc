#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowdpt/envsuite.hpp"
#include "flowdpt/rng.hpp"

// Continuous noise distillation: roll out the demonstrator with additive
// Gaussian action noise at increasing levels, keep every visited state and
// relabel it with the demonstrator's action there.
namespace flowdpt::data {

inline constexpr std::uint32_t kShardFormatVersion = 1;

struct NoiseSchedule {
  std::vector<double> levels{0.0, 0.25, 0.5, 1.0, 2.0};
  std::size_t episodes_per_level = 20;

  // Levels non-negative, sorted, containing 0; episodes positive.
  void validate() const;
};

void to_json(nlohmann::json& j, const NoiseSchedule& s);
void from_json(const nlohmann::json& j, NoiseSchedule& s);

// One stored transition. Values are single precision on disk and in memory
// so a round trip through a shard is exact.
struct Record {
  std::vector<float> obs;
  std::vector<float> action;  // behavior action actually executed
  float reward = 0.0f;        // unscaled
  std::vector<float> a_star;  // demonstrator action at obs

  friend bool operator==(const Record&, const Record&) = default;
};

// Contiguous range [begin, end) of records collected at one noise level.
struct LevelStats {
  double sigma = 0.0;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t episodes = 0;
  double mean_return = 0.0;

  friend bool operator==(const LevelStats&, const LevelStats&) = default;
};

struct ShardManifest {
  std::uint32_t format_version = kShardFormatVersion;
  std::string task_id;
  std::string group_id;
  std::size_t obs_dim = 0;
  std::size_t act_dim = 0;
  double reward_scale = 1.0;
  std::size_t n_transitions = 0;
  nlohmann::json task;  // registry descriptor of the source task
  std::vector<LevelStats> levels;

  friend bool operator==(const ShardManifest&, const ShardManifest&) = default;
};

void to_json(nlohmann::json& j, const ShardManifest& m);
void from_json(const nlohmann::json& j, ShardManifest& m);

struct Shard {
  ShardManifest manifest;
  std::vector<Record> records;

  // Counts and per-record dimensions agree with the manifest.
  void validate() const;
  friend bool operator==(const Shard&, const Shard&) = default;
};

class CollectError : public std::runtime_error {
 public:
  CollectError(std::string task_id, std::size_t episode, const std::string& what);
  const std::string& task_id() const { return task_id_; }
  std::size_t episode() const { return episode_; }

 private:
  std::string task_id_;
  std::size_t episode_;
};

// Episodes run level by level; episode e draws from rng.stream("episode", e).
Shard collect_cnd(const env::TaskInstance& task, const NoiseSchedule& schedule, const Rng& rng);

// Shard file layout, all integers and floats little-endian:
//   "FDPTSHRD" | u32 version | u32 manifest bytes | manifest JSON | u32 crc
//   then groups of up to kRecordsPerGroup records, each record stored as
//   f32 [obs | action | reward | a_star], each group followed by its u32 crc.
// A copy of the manifest is also written next to the shard as <stem>.json.
inline constexpr std::size_t kRecordsPerGroup = 256;

class ShardError : public std::runtime_error {
 public:
  enum class Kind { io, version_mismatch, truncated, checksum, malformed };
  ShardError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

const char* to_string(ShardError::Kind kind);

std::filesystem::path manifest_path(const std::filesystem::path& shard_path);
void write_shard(const std::filesystem::path& path, const Shard& shard);
Shard read_shard(const std::filesystem::path& path);

// All *.shard files of a directory, in file-name order.
struct Dataset {
  std::vector<Shard> shards;

  std::size_t n_transitions() const;
  std::vector<std::string> group_ids() const;  // sorted, unique
};

Dataset load_dataset(const std::filesystem::path& dir);

struct TrainingSample {
  std::size_t shard = 0;
  std::vector<double> query_obs;
  std::vector<env::Transition> context;  // already in random order
  std::vector<double> a_star;
};

struct Batch {
  std::string group_id;
  std::vector<TrainingSample> samples;
};

struct SamplerOptions {
  // Keep the query transition out of its own context.
  bool exclude_query = true;
  // Draw context from any noise level of the task; when false, only from
  // the query's level.
  bool mix_noise_levels = true;
};

void to_json(nlohmann::json& j, const SamplerOptions& o);
void from_json(const nlohmann::json& j, SamplerOptions& o);

// Draws DPT training tuples. Each batch comes from a single task group,
// picked with probability proportional to its transition count; within
// the group each sample picks a task the same way. Tasks without enough
// transitions for a context of L are skipped with a warning.
class Sampler {
 public:
  Sampler(const Dataset& dataset, std::size_t context_len, SamplerOptions options = {});

  std::size_t context_len() const { return context_len_; }
  // Shard indices usable at this context length.
  const std::vector<std::size_t>& eligible() const { return eligible_; }

  Batch sample(std::size_t batch_size, Rng& rng) const;
  TrainingSample sample_from(std::size_t shard, Rng& rng) const;

 private:
  struct GroupPool {
    std::string id;
    std::vector<std::size_t> shards;
    std::vector<double> cumulative;  // transition counts
  };

  const Dataset& dataset_;
  std::size_t context_len_;
  SamplerOptions options_;
  std::vector<std::size_t> eligible_;
  std::vector<GroupPool> groups_;
  std::vector<double> group_cumulative_;
};

Batch sample_batch(const Dataset& dataset, std::size_t context_len, std::size_t batch_size,
                   Rng& rng, SamplerOptions options = {});

}  // namespace flowdpt::data
