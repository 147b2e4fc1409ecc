#include "flowdpt/ndgrad/graph.hpp"

#include <stdexcept>
#include <string>

namespace flowdpt::nd {

const Array& Var::value() const {
  if (!graph_) throw std::logic_error("Var: use of an unbound handle");
  return graph_->value(*this);
}

Var Graph::check_owned(Var v, const char* op) const {
  if (v.graph_ != this) {
    throw std::invalid_argument(std::string(op) + ": variable belongs to another graph");
  }
  return v;
}

Var Graph::input(Array value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
    return Var(this, it->second);
  }
  Node n;
  n.param = &p;
  n.requires_grad = mode_ == GradMode::enabled;
  nodes_.push_back(std::move(n));
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Array value, std::initializer_list<Var> inputs, Adjoint adjoint) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(adjoint));
}

Var Graph::record(Array value, std::span<const Var> inputs, Adjoint adjoint) {
  Node n;
  n.value = std::move(value);
  bool any = false;
  for (Var v : inputs) {
    check_owned(v, "Graph::record");
    any = any || nodes_[v.id_].requires_grad;
  }
  if (any) {
    n.inputs.reserve(inputs.size());
    for (Var v : inputs) n.inputs.push_back(v.id_);
    n.adjoint = std::move(adjoint);
    n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Graph::backward(Var loss) {
  check_owned(loss, "Graph::backward");
  if (mode_ != GradMode::enabled) {
    throw std::logic_error("Graph::backward: gradients are disabled for this graph");
  }
  const Array& lv = value(loss);
  if (lv.size() != 1) {
    throw ShapeError("Graph::backward: loss must be a scalar, got shape " +
                     shape_string(lv.shape()));
  }
  for (auto& n : nodes_) n.grad = Array();
  nodes_[loss.id_].grad = Array(lv.shape(), 1.0);

  std::vector<Array*> grad_in;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.adjoint) continue;
    grad_in.assign(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      Node& in = nodes_[n.inputs[k]];
      if (!in.requires_grad) continue;
      if (in.grad.empty()) in.grad = Array(value(Var(this, n.inputs[k])).shape(), 0.0);
      grad_in[k] = &in.grad;
    }
    n.adjoint(n.value, n.grad, grad_in);
  }
  for (auto& [p, id] : param_nodes_) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Array(p->value.shape(), 0.0);
  }
  has_backward_ = true;
}

const Array& Graph::gradient(const Parameter& p) const {
  auto it = param_nodes_.find(&p);
  if (it == param_nodes_.end()) {
    throw std::invalid_argument("Graph::gradient: parameter '" + p.name +
                                "' is not bound to this graph");
  }
  if (!has_backward_) throw std::logic_error("Graph::gradient: backward() has not run");
  return nodes_[it->second].grad;
}

void Graph::accumulate_gradients(GradientSet& grads, double scale) const {
  if (!has_backward_) {
    throw std::logic_error("Graph::accumulate_gradients: backward() has not run");
  }
  for (const auto& [p, id] : param_nodes_) {
    Array& dst = grads[p->index];
    const Array& src = nodes_[id].grad;
    if (dst.shape() != src.shape()) {
      throw ShapeError("Graph::accumulate_gradients(" + p->name + ")", dst.shape(),
                       src.shape());
    }
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += scale * src[i];
  }
}

}  // namespace flowdpt::nd
