#include "flowdpt/backbone.hpp"

#include <stdexcept>
#include <string>

#include "flowdpt/ndgrad/ops.hpp"

namespace flowdpt::backbone {

void BackboneConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || max_context == 0) {
    throw std::invalid_argument("BackboneConfig: all sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("BackboneConfig: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},         {"d_model", c.d_model},
       {"d_ff", c.d_ff},         {"max_context", c.max_context}, {"activation", nd::to_string(c.activation)}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  BackboneConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_model = j.value("d_model", d.d_model);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_context = j.value("max_context", d.max_context);
  c.activation = nd::parse_activation(j.value("activation", std::string("gelu")));
}

CausalMask::CausalMask(std::size_t n) : n_(n) {
  if (n == 0) throw std::invalid_argument("causal_mask: n must be at least 1");
}

std::vector<std::vector<bool>> CausalMask::matrix() const {
  std::vector<std::vector<bool>> m(n_, std::vector<bool>(n_, false));
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m[i][j] = true;
  }
  return m;
}

CausalMask causal_mask(std::size_t n) { return CausalMask(n); }

Backbone::Backbone(nd::ParameterStore& store, const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model;
  auto ln = [&](const std::string& name, double fill) {
    return &store.add(name, nd::Array({1, d}, fill));
  };
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "backbone." + std::to_string(l);
    Block b{ln(p + ".ln1.gain", 1.0),
            ln(p + ".ln1.bias", 0.0),
            nd::Linear(store, p + ".attn.q", d, d, rng),
            nd::Linear(store, p + ".attn.k", d, d, rng),
            nd::Linear(store, p + ".attn.v", d, d, rng),
            nd::Linear(store, p + ".attn.o", d, d, rng),
            ln(p + ".ln2.gain", 1.0),
            ln(p + ".ln2.bias", 0.0),
            nd::Linear(store, p + ".ff.in", d, cfg_.d_ff, rng),
            nd::Linear(store, p + ".ff.out", cfg_.d_ff, d, rng)};
    blocks_.push_back(b);
  }
  lnf_gain_ = ln("backbone.ln_f.gain", 1.0);
  lnf_bias_ = ln("backbone.ln_f.bias", 0.0);
}

nd::Var Backbone::forward(nd::Var x, std::size_t seq_len) const {
  if (x.cols() != cfg_.d_model) {
    throw nd::ShapeError("Backbone::forward", {x.rows(), cfg_.d_model}, x.shape());
  }
  const std::size_t T = seq_len == 0 ? x.rows() : seq_len;
  if (T > cfg_.max_sequence()) {
    throw std::invalid_argument("Backbone::forward: sequence length " + std::to_string(T) +
                                " exceeds limit " + std::to_string(cfg_.max_sequence()));
  }
  nd::Graph& g = x.graph();
  for (const Block& b : blocks_) {
    nd::Var a = nd::layer_norm(x, g.param(*b.ln1_gain), g.param(*b.ln1_bias));
    nd::Var att = nd::causal_self_attention(b.q(a), b.k(a), b.v(a), cfg_.n_heads, seq_len);
    x = nd::add(x, b.o(att));
    nd::Var m = nd::layer_norm(x, g.param(*b.ln2_gain), g.param(*b.ln2_bias));
    x = nd::add(x, b.ff_out(nd::activate(b.ff_in(m), cfg_.activation)));
  }
  return nd::layer_norm(x, g.param(*lnf_gain_), g.param(*lnf_bias_));
}

}  // namespace flowdpt::backbone
