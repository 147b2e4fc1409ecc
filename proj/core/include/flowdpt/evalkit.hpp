#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowdpt/envsuite.hpp"
#include "flowdpt/ndgrad/array.hpp"
#include "flowdpt/runtime.hpp"

namespace flowdpt::eval {

class DegenerateBaseline : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// (raw - random) / (expert - random); throws DegenerateBaseline when the
// two baselines coincide.
double normalized_score(double raw, double random, double expert);

// Mean of the values left after dropping floor(n/4) from each end of the
// sorted input.
double iqm(std::span<const double> values);

double mean(std::span<const double> values);

struct ScoreRecord {
  std::string task_id;
  std::string split;
  std::uint64_t seed = 0;
  double raw = 0.0;
  double random = 0.0;
  double expert = 0.0;
  double normalized = 0.0;
};

ScoreRecord make_score(std::string task_id, std::string split, std::uint64_t seed, double raw,
                       double random, double expert);

// Monte-Carlo baselines of a task, drawn from rng.stream("random") and
// rng.stream("expert").
struct Baselines {
  double random = 0.0;
  double expert = 0.0;
};
Baselines task_baselines(const env::TaskInstance& task, std::size_t n_episodes, const Rng& rng);

// ½ log det(cov + eps I) + (d/2) log(2 pi e), cov the (biased, 1/n) sample
// covariance of the rows of samples [n, d].
double entropy_proxy(const nd::Array& samples, double eps = 1e-6);

// Centered rows projected onto the top two principal directions [n, 2].
// Inputs with a single column are padded with a zero second component.
nd::Array tsvd_2d(const nd::Array& samples);

struct SweepCell {
  std::string task_id;
  std::size_t prompt_size = 0;
  std::vector<double> normalized;  // one per seed
  double iqm = 0.0;
};

struct SweepConfig {
  std::vector<std::size_t> prompt_sizes{0, 5, 25, 100};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3};
  std::size_t episodes = 10;
  std::size_t baseline_episodes = 1000;
  flow::FlowConfig flow;
  std::size_t jobs = 1;
};

// Offline evaluation per (task, prompt size, seed) with demonstrator
// prompts; rows are ordered task-major then by prompt size.
std::vector<SweepCell> demo_sweep(const runtime::Model& model,
                                  const std::vector<env::TaskInstance>& tasks,
                                  const SweepConfig& cfg, const Rng& rng);

// IQM over tasks of the per-cell IQMs for one prompt size.
double sweep_iqm(const std::vector<SweepCell>& cells, std::size_t prompt_size);

struct ContractionEntry {
  std::size_t context_size = 0;
  nd::Array samples;     // [n, act_dim]
  nd::Array projection;  // [n, 2]
  double entropy = 0.0;
};

struct ContractionReport {
  std::string task_id;
  std::vector<double> query_obs;
  std::vector<ContractionEntry> entries;
};

// For each size draws n_samples actions at the same query with the first
// `size` transitions of one demonstrator prompt as context. Sizes must be
// ascending and within the model's context limit.
ContractionReport contraction_analysis(const runtime::Model& model, const env::TaskInstance& task,
                                       std::span<const double> query_obs,
                                       std::span<const std::size_t> sizes, std::size_t n_samples,
                                       const flow::FlowConfig& flow, const Rng& rng);

// Clips sizes to the model's context limit and removes duplicates.
std::vector<std::size_t> clip_sizes(std::span<const std::size_t> sizes, std::size_t max_context);

// CSV writers; each file starts with a header row.
void write_scores_csv(const std::filesystem::path& path, const std::vector<ScoreRecord>& rows);
struct EpisodeReturn {
  std::size_t episode = 0;  // 1-based
  double ret = 0.0;
  std::uint64_t seed = 0;
  std::string task_id;
};
void write_returns_csv(const std::filesystem::path& path, const std::vector<EpisodeReturn>& rows);
void write_loss_csv(const std::filesystem::path& path, const std::vector<runtime::LossRecord>& rows,
                    bool append);
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepCell>& cells,
                     std::span<const std::uint64_t> seeds);
void write_contraction_csv(const std::filesystem::path& path, const ContractionReport& report);

// Standalone SVG plots.
void write_line_svg(const std::filesystem::path& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<double>& x, const std::vector<double>& y);
void write_contraction_svg(const std::filesystem::path& path, const ContractionReport& report);

}  // namespace flowdpt::eval
