#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "flowdpt/ndgrad/graph.hpp"
#include "flowdpt/ndgrad/parameters.hpp"
#include "flowdpt/rng.hpp"

namespace flowdpt::nd {

enum class Activation { gelu, silu };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);
Var activate(Var x, Activation a);

// y = x W + b with W [in, out] and b [1, out]. Weights start uniform in
// +-1/sqrt(in); biases start at zero.
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
         Rng& rng);

  Var operator()(Var x) const;
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }
  Parameter& weight() const { return *w_; }
  Parameter& bias() const { return *b_; }

 private:
  Parameter* w_ = nullptr;
  Parameter* b_ = nullptr;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

// Dense layers with an activation between consecutive layers (none after
// the last).
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, const std::vector<std::size_t>& widths,
      Activation act, Rng& rng);

  Var operator()(Var x) const;
  std::size_t in() const { return layers_.front().in(); }
  std::size_t out() const { return layers_.back().out(); }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
  Activation act_ = Activation::gelu;
};

}  // namespace flowdpt::nd
