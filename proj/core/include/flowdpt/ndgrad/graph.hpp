#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <unordered_map>
#include <vector>

#include "flowdpt/ndgrad/array.hpp"
#include "flowdpt/ndgrad/parameters.hpp"

namespace flowdpt::nd {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Adjoint of a recorded op: receives the op's forward value and the upstream
// gradient, and accumulates into the gradient buffers of its inputs. Entries
// of grad_in are null for inputs that do not require gradients.
using Adjoint = std::function<void(const Array& out, const Array& grad_out,
                                   std::span<Array* const> grad_in)>;

enum class GradMode { enabled, disabled };

// Tape of operations in creation order, which is a topological order.
// Single-threaded; independent graphs may run concurrently when they only
// read shared parameters.
class Graph {
 public:
  explicit Graph(GradMode mode = GradMode::enabled) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Array value);
  // Binding the same parameter twice returns the same leaf.
  Var param(const Parameter& p);

  Var record(Array value, std::initializer_list<Var> inputs, Adjoint adjoint);
  Var record(Array value, std::span<const Var> inputs, Adjoint adjoint);

  const Array& value(Var v) const {
    const Node& n = nodes_[v.id_];
    return n.param ? n.param->value : n.value;
  }
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  GradMode mode() const { return mode_; }

  // Reverse sweep from a scalar loss. Each node is visited once, in reverse
  // creation order.
  void backward(Var loss);

  // Gradient of a bound parameter after backward(); zeros when the
  // parameter does not reach the loss.
  const Array& gradient(const Parameter& p) const;
  // grads[p.index] += scale * dloss/dp for every bound parameter.
  void accumulate_gradients(GradientSet& grads, double scale = 1.0) const;

 private:
  struct Node {
    Array value;  // unused for parameter leaves
    Array grad;
    std::vector<std::size_t> inputs;
    Adjoint adjoint;
    const Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var check_owned(Var v, const char* op) const;

  GradMode mode_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool has_backward_ = false;
};

}  // namespace flowdpt::nd
