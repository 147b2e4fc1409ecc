#pragma once

#include <cstddef>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowdpt/ndgrad/layers.hpp"

namespace flowdpt::backbone {

// Desk-scale defaults. The reference model used 16 layers, 24 heads,
// d_model 1536, d_ff 6144 and a 4096-token context.
struct BackboneConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t max_context = 128;  // longest context; sequences add BOS + query
  nd::Activation activation = nd::Activation::gelu;

  void validate() const;
  std::size_t max_sequence() const { return max_context + 2; }
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

// allows(i, j) iff j <= i.
class CausalMask {
 public:
  explicit CausalMask(std::size_t n);
  std::size_t size() const { return n_; }
  bool allows(std::size_t i, std::size_t j) const { return j <= i && i < n_; }
  std::size_t allowed_count() const { return n_ * (n_ + 1) / 2; }
  std::vector<std::vector<bool>> matrix() const;

 private:
  std::size_t n_;
};

CausalMask causal_mask(std::size_t n);

// Pre-norm causal transformer without positional information: the only
// ordering signal is the causal mask.
class Backbone {
 public:
  Backbone(nd::ParameterStore& store, const BackboneConfig& cfg, Rng& rng);

  // tokens [T, d_model] -> hidden states [T, d_model]; row j sees rows 0..j.
  // With seq_len > 0 the rows are a stack of independent sequences of that
  // length.
  nd::Var forward(nd::Var tokens, std::size_t seq_len = 0) const;
  const BackboneConfig& config() const { return cfg_; }

 private:
  struct Block {
    nd::Parameter* ln1_gain;
    nd::Parameter* ln1_bias;
    nd::Linear q, k, v, o;
    nd::Parameter* ln2_gain;
    nd::Parameter* ln2_bias;
    nd::Linear ff_in, ff_out;
  };

  BackboneConfig cfg_;
  std::vector<Block> blocks_;
  nd::Parameter* lnf_gain_ = nullptr;
  nd::Parameter* lnf_bias_ = nullptr;
};

}  // namespace flowdpt::backbone
