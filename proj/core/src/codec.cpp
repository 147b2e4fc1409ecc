#include "flowdpt/codec.hpp"

#include <stdexcept>
#include <vector>

#include "flowdpt/ndgrad/ops.hpp"

namespace flowdpt::codec {

SliceWidths SliceWidths::defaults(std::size_t d_model) {
  const std::size_t obs = d_model / 2;
  const std::size_t act = d_model / 4;
  return {obs, act, d_model - obs - act};
}

void TaskGroup::validate(std::size_t d_model) const {
  if (id.empty()) throw std::invalid_argument("TaskGroup: empty group id");
  if (obs_dim == 0 || act_dim == 0) {
    throw std::invalid_argument("TaskGroup '" + id + "': obs_dim and act_dim must be positive");
  }
  if (widths.obs == 0 || widths.act == 0 || widths.rew == 0 || widths.total() != d_model) {
    throw std::invalid_argument("TaskGroup '" + id + "': slice widths must be positive and sum to d_model=" +
                                std::to_string(d_model));
  }
  if (!(reward_scale > 0.0)) throw std::invalid_argument("TaskGroup '" + id + "': reward_scale must be positive");
}

void to_json(nlohmann::json& j, const TaskGroup& g) {
  j = {{"group_id", g.id},
       {"obs_dim", g.obs_dim},
       {"act_dim", g.act_dim},
       {"slice_widths", {g.widths.obs, g.widths.act, g.widths.rew}},
       {"reward_scale", g.reward_scale}};
}

void from_json(const nlohmann::json& j, TaskGroup& g) {
  g.id = j.at("group_id").get<std::string>();
  g.obs_dim = j.at("obs_dim").get<std::size_t>();
  g.act_dim = j.at("act_dim").get<std::size_t>();
  const auto w = j.at("slice_widths").get<std::vector<std::size_t>>();
  if (w.size() != 3) throw std::invalid_argument("slice_widths must have three entries");
  g.widths = {w[0], w[1], w[2]};
  g.reward_scale = j.value("reward_scale", 1.0);
}

GroupCodec::GroupCodec(nd::ParameterStore& store, TaskGroup group, std::size_t d_model,
                       nd::Activation act, Rng& rng)
    : group_(std::move(group)), d_model_(d_model) {
  group_.validate(d_model);
  const std::string base = "codec." + group_.id;
  obs_net_ = nd::Mlp(store, base + ".obs", {group_.obs_dim, d_model, group_.widths.obs}, act, rng);
  act_net_ = nd::Mlp(store, base + ".act", {group_.act_dim, d_model, group_.widths.act}, act, rng);
  rew_net_ = nd::Mlp(store, base + ".rew", {1, d_model, group_.widths.rew}, act, rng);
}

nd::Var GroupCodec::encode_transitions(nd::Graph& g, const nd::Array& obs, const nd::Array& act,
                                       const nd::Array& rew) const {
  if (obs.cols() != group_.obs_dim) {
    throw nd::ShapeError("encode_transitions(obs)", {obs.rows(), group_.obs_dim}, obs.shape());
  }
  if (act.shape() != nd::Shape{obs.rows(), group_.act_dim}) {
    throw nd::ShapeError("encode_transitions(act)", {obs.rows(), group_.act_dim}, act.shape());
  }
  if (rew.shape() != nd::Shape{obs.rows(), 1}) {
    throw nd::ShapeError("encode_transitions(reward)", {obs.rows(), 1}, rew.shape());
  }
  nd::Array scaled = rew;
  for (double& r : scaled.data()) r *= group_.reward_scale;
  const nd::Var parts[] = {obs_net_(g.input(obs)), act_net_(g.input(act)),
                           rew_net_(g.input(std::move(scaled)))};
  return nd::concat_cols(parts);
}

nd::Var GroupCodec::encode_transition(nd::Graph& g, std::span<const double> obs,
                                      std::span<const double> act, double reward) const {
  return encode_transitions(g, nd::Array::row(obs), nd::Array::row(act), nd::Array::scalar(reward));
}

nd::Var GroupCodec::encode_query(nd::Graph& g, std::span<const double> obs) const {
  if (obs.size() != group_.obs_dim) {
    throw nd::ShapeError("encode_query", {1, group_.obs_dim}, {1, obs.size()});
  }
  return encode_queries(g, nd::Array::row(obs));
}

nd::Var GroupCodec::encode_queries(nd::Graph& g, const nd::Array& obs) const {
  if (obs.cols() != group_.obs_dim) {
    throw nd::ShapeError("encode_queries", {obs.rows(), group_.obs_dim}, obs.shape());
  }
  const nd::Var parts[] = {obs_net_(g.input(obs)),
                           g.input(nd::Array({obs.rows(), group_.widths.act + group_.widths.rew}, 0.0))};
  return nd::concat_cols(parts);
}

bool is_permutation(std::span<const std::size_t> perm, std::size_t n) {
  if (perm.size() != n) return false;
  std::vector<bool> seen(n, false);
  for (std::size_t p : perm) {
    if (p >= n || seen[p]) return false;
    seen[p] = true;
  }
  return true;
}

TokenSequence assemble(nd::Var bos, nd::Var query, nd::Var context,
                       std::span<const std::size_t> perm) {
  const std::size_t n = context.valid() ? context.rows() : 0;
  if (!is_permutation(perm, n)) {
    throw std::invalid_argument("assemble: perm is not a permutation of 0.." +
                                std::to_string(n == 0 ? 0 : n - 1) + " (size " +
                                std::to_string(perm.size()) + ")");
  }
  if (bos.shape() != query.shape() || bos.rows() != 1) {
    throw nd::ShapeError("assemble(bos, query)", bos.shape(), query.shape());
  }
  std::vector<nd::Var> rows = {bos, query};
  if (n > 0) {
    if (context.cols() != query.cols()) throw nd::ShapeError("assemble(context)", query.shape(), context.shape());
    rows.push_back(nd::gather_rows(context, perm));
  }
  return {nd::concat_rows(rows), n};
}

}  // namespace flowdpt::codec
