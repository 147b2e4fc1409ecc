#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowdpt/ndgrad/parameters.hpp"

namespace flowdpt::nd {

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

struct AdamState {
  AdamState() = default;
  explicit AdamState(const ParameterStore& store);

  std::vector<Array> m;
  std::vector<Array> v;
  std::int64_t step = 0;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(std::string param)
      : std::runtime_error("non-finite gradient for parameter '" + param + "'"),
        param_(std::move(param)) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

// Bias-corrected Adam. Every gradient is checked before any parameter moves;
// on a non-finite entry nothing is updated and NonFiniteGradient names the
// first offending parameter.
void adam_step(ParameterStore& params, const GradientSet& grads, AdamState& state,
               const AdamConfig& cfg);

// Rescales all gradients by max_norm / norm when the global L2 norm exceeds
// max_norm. Returns the norm measured before clipping.
double clip_global_norm(GradientSet& grads, double max_norm);

}  // namespace flowdpt::nd
