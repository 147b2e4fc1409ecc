#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowdpt/backbone.hpp"
#include "flowdpt/codec.hpp"
#include "flowdpt/datagen.hpp"
#include "flowdpt/envsuite.hpp"
#include "flowdpt/flowhead.hpp"
#include "flowdpt/ndgrad/adam.hpp"
#include "flowdpt/ndgrad/checkpoint.hpp"

namespace flowdpt::runtime {

enum class HeadKind { flow, gaussian };
HeadKind parse_head(const std::string& s);
std::string to_string(HeadKind h);

struct ModelConfig {
  backbone::BackboneConfig backbone;
  HeadKind head = HeadKind::flow;
  std::size_t d_gamma = 32;
  double f_min = 1.0;
  double f_max = 1000.0;
  std::vector<codec::TaskGroup> groups;

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// One task group per distinct group id of the dataset, with the dataset's
// reward scale and default slice widths.
std::vector<codec::TaskGroup> groups_from_dataset(const data::Dataset& ds, std::size_t d_model);

// Transformer backbone, BOS token, time embedding and per-group codec and
// action head, all registered in one parameter store.
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t init_seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  struct GroupHeads {
    codec::GroupCodec codec;
    flow::VectorField field;     // flow head only
    flow::GaussianHead gaussian; // gaussian head only
  };

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t init_seed() const { return init_seed_; }
  nd::ParameterStore& params() { return store_; }
  const nd::ParameterStore& params() const { return store_; }
  const backbone::Backbone& backbone() const { return *backbone_; }
  const flow::TimeEmbedding& time() const { return time_; }
  const nd::Parameter& bos() const { return *bos_; }
  const GroupHeads& group(const std::string& id) const;
  std::size_t max_context() const { return cfg_.backbone.max_context; }

  // Hidden states of positions 1..L+1 for every sample of a batch, stacked
  // as [B * (L + 1), d_model]. All samples must share one context length.
  nd::Var supervised_hidden(nd::Graph& g, const std::string& group,
                            std::span<const data::TrainingSample> samples) const;
  // Mean loss over supervised positions and samples: rectified flow for the
  // flow head, negative log-likelihood for the Gaussian head.
  nd::Var loss(nd::Graph& g, const data::Batch& batch, Rng& rng) const;

  // Final-position hidden state [1, d_model] of [BOS, query, context...].
  nd::Array last_hidden(const std::string& group, std::span<const double> obs,
                        std::span<const env::Transition> context) const;

  // n action samples [n, act_dim] for one query and context.
  nd::Array sample_actions(const std::string& group, std::span<const double> obs,
                           std::span<const env::Transition> context, std::size_t n,
                           const flow::FlowConfig& flow, Rng& rng) const;

 private:
  ModelConfig cfg_;
  std::uint64_t init_seed_;
  nd::ParameterStore store_;
  std::unique_ptr<backbone::Backbone> backbone_;
  flow::TimeEmbedding time_;
  nd::Parameter* bos_ = nullptr;
  std::map<std::string, GroupHeads> groups_;
};

// Samples one action; equivalent to sample_actions with n = 1.
std::vector<double> act(const Model& model, const std::string& group,
                        std::span<const env::Transition> context, std::span<const double> obs,
                        const flow::FlowConfig& flow, Rng& rng);

// Checkpoint manifest metadata carries the model config (with the group
// registry) and the init seed; the optimizer step is the training step.
void save_model(const std::filesystem::path& manifest, const Model& model,
                const nd::AdamState* adam, const nlohmann::json& extra = {});
struct LoadedModel {
  std::unique_ptr<Model> model;
  nd::AdamState adam;
  nlohmann::json metadata;
};
LoadedModel load_model(const std::filesystem::path& manifest);

struct TrainerConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double clip_norm = 2.5;
  std::size_t batch_size = 64;
  std::size_t steps = 1000;  // total, including steps of a resumed run
  std::size_t context_len = 100;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  data::SamplerOptions sampler;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainerConfig& c);
void from_json(const nlohmann::json& j, TrainerConfig& c);

struct LossRecord {
  std::int64_t step = 0;  // 1-based optimizer step
  double loss = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::int64_t step, const std::string& what)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct TrainHooks {
  std::function<void(const LossRecord&)> on_step;
  // Called every checkpoint_every steps with the model in a good state.
  std::function<void(std::int64_t step)> on_checkpoint;
};

// Runs optimizer steps adam.step + 1 .. cfg.steps. Step k samples its batch
// and noise from Rng(cfg.seed).stream("train", k), so a resumed run follows
// the same trajectory as an uninterrupted one. On a non-finite loss or
// gradient the parameters and optimizer state of the last good step are
// restored and TrainingDiverged is thrown.
std::vector<LossRecord> train(Model& model, nd::AdamState& adam, const TrainerConfig& cfg,
                              const data::Dataset& dataset, const TrainHooks& hooks = {});

// Bounded FIFO of transitions: pushing beyond capacity drops the oldest.
class ContextBuffer {
 public:
  explicit ContextBuffer(std::size_t capacity) : capacity_(capacity) {}

  void push(env::Transition t);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }
  std::span<const env::Transition> entries() const { return entries_; }
  std::size_t pushes() const { return pushes_; }

 private:
  std::size_t capacity_;
  std::vector<env::Transition> entries_;
  std::size_t pushes_ = 0;
};

enum class Mode { online, offline };
Mode parse_mode(const std::string& s);
std::string to_string(Mode m);

struct InferenceConfig {
  Mode mode = Mode::online;
  std::vector<env::Transition> prompt;  // offline only
  std::size_t episodes = 50;
  flow::FlowConfig flow;
  std::size_t context_len = 0;  // online capacity; 0 means the model's max
  bool reset_context = false;   // online: clear the buffer between episodes

  void validate(const Model& model) const;
};

// Invoked before every action with the context the model conditions on.
using ContextObserver =
    std::function<void(std::size_t episode, std::size_t step, std::span<const env::Transition>)>;

// Context starts empty; every realized (o, a, r) is appended and the oldest
// entry evicted beyond capacity. The buffer carries across episodes unless
// reset_context is set. Episode e uses rng.stream("episode", e).
std::vector<double> rollout_online(const Model& model, const env::TaskInstance& task,
                                   const InferenceConfig& cfg, const Rng& rng,
                                   const ContextObserver& observer = {});

// The context is exactly the prompt at every step of every episode.
std::vector<double> rollout_offline(const Model& model, const env::TaskInstance& task,
                                    std::span<const env::Transition> prompt,
                                    const InferenceConfig& cfg, const Rng& rng,
                                    const ContextObserver& observer = {});

// n transitions from demonstrator episodes (no action noise).
std::vector<env::Transition> demonstrator_prompt(const env::TaskInstance& task, std::size_t n,
                                                 const Rng& rng);

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results must be
// written to per-index slots; the schedule does not affect them.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace flowdpt::runtime
