#pragma once

#include <cstddef>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "flowdpt/ndgrad/layers.hpp"

namespace flowdpt::codec {

// Token slice widths for (observation, action, reward); they sum to d_model.
struct SliceWidths {
  std::size_t obs = 0;
  std::size_t act = 0;
  std::size_t rew = 0;

  std::size_t total() const { return obs + act + rew; }
  // d_model/2, d_model/4, remainder.
  static SliceWidths defaults(std::size_t d_model);
  friend bool operator==(const SliceWidths&, const SliceWidths&) = default;
};

// Tasks sharing observation and action dimensionality. Each group gets its
// own encoders and action head.
struct TaskGroup {
  std::string id;
  std::size_t obs_dim = 0;
  std::size_t act_dim = 0;
  SliceWidths widths;
  double reward_scale = 1.0;

  void validate(std::size_t d_model) const;
  friend bool operator==(const TaskGroup&, const TaskGroup&) = default;
};

void to_json(nlohmann::json& j, const TaskGroup& g);
void from_json(const nlohmann::json& j, TaskGroup& g);

// Per-group encoders phi_o, phi_a, phi_r: two dense layers each, hidden
// width d_model.
class GroupCodec {
 public:
  GroupCodec(nd::ParameterStore& store, TaskGroup group, std::size_t d_model, nd::Activation act,
             Rng& rng);

  const TaskGroup& group() const { return group_; }
  std::size_t d_model() const { return d_model_; }

  // Rows of obs [n, obs_dim], act [n, act_dim], rew [n, 1] become tokens
  // [n, d_model] laid out as cat(phi_o(o), phi_a(a), phi_r(reward_scale * r)).
  nd::Var encode_transitions(nd::Graph& g, const nd::Array& obs, const nd::Array& act,
                             const nd::Array& rew) const;
  nd::Var encode_transition(nd::Graph& g, std::span<const double> obs,
                            std::span<const double> act, double reward) const;
  // cat(phi_o(o_q), 0, 0): action and reward slices are exactly zero.
  nd::Var encode_query(nd::Graph& g, std::span<const double> obs) const;
  // One query token per row of obs [n, obs_dim].
  nd::Var encode_queries(nd::Graph& g, const nd::Array& obs) const;

  const nd::Mlp& obs_net() const { return obs_net_; }
  const nd::Mlp& act_net() const { return act_net_; }
  const nd::Mlp& rew_net() const { return rew_net_; }

 private:
  TaskGroup group_;
  std::size_t d_model_;
  nd::Mlp obs_net_;
  nd::Mlp act_net_;
  nd::Mlp rew_net_;
};

// Input sequence [BOS, query, context...] as rows of a [n + 2, d_model] node.
struct TokenSequence {
  static constexpr std::size_t kBosIndex = 0;
  static constexpr std::size_t kQueryIndex = 1;

  nd::Var tokens;
  std::size_t n_context = 0;

  std::size_t size() const { return n_context + 2; }
};

bool is_permutation(std::span<const std::size_t> perm, std::size_t n);

// Places bos at 0, query at 1 and context row perm[i] at 2 + i. `context`
// may be an unbound Var when there is no context.
TokenSequence assemble(nd::Var bos, nd::Var query, nd::Var context,
                       std::span<const std::size_t> perm);

}  // namespace flowdpt::codec
