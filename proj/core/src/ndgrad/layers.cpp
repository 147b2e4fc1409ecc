#include "flowdpt/ndgrad/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "flowdpt/ndgrad/ops.hpp"

namespace flowdpt::nd {

Activation parse_activation(const std::string& name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "silu") return Activation::silu;
  throw std::invalid_argument("unknown activation '" + name + "' (expected gelu or silu)");
}

std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "silu"; }

Var activate(Var x, Activation a) { return a == Activation::gelu ? gelu(x) : silu(x); }

Linear::Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
               Rng& rng)
    : in_(in), out_(out) {
  Array w({in, out});
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& x : w.data()) x = rng.uniform(-bound, bound);
  w_ = &store.add(name + ".w", std::move(w));
  b_ = &store.add(name + ".b", Array({1, out}, 0.0));
}

Var Linear::operator()(Var x) const {
  Graph& g = x.graph();
  return add(matmul(x, g.param(*w_)), g.param(*b_));
}

Mlp::Mlp(ParameterStore& store, const std::string& name, const std::vector<std::size_t>& widths,
         Activation act, Rng& rng)
    : act_(act) {
  if (widths.size() < 2) throw std::invalid_argument("Mlp: need at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    layers_.emplace_back(store, name + "." + std::to_string(i), widths[i], widths[i + 1], rng);
  }
}

Var Mlp::operator()(Var x) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i](x);
    if (i + 1 < layers_.size()) x = activate(x, act_);
  }
  return x;
}

}  // namespace flowdpt::nd
