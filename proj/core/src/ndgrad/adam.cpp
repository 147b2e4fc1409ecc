#include "flowdpt/ndgrad/adam.hpp"

#include <cmath>

namespace flowdpt::nd {

AdamState::AdamState(const ParameterStore& store) {
  m.reserve(store.size());
  v.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    m.emplace_back(store.at(i).value.shape(), 0.0);
    v.emplace_back(store.at(i).value.shape(), 0.0);
  }
}

void adam_step(ParameterStore& params, const GradientSet& grads, AdamState& state,
               const AdamConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("adam_step: lr must be positive");
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params.at(i).value.shape()) {
      throw ShapeError("adam_step(" + params.at(i).name + ")", params.at(i).value.shape(),
                       grads[i].shape());
    }
    if (!grads[i].all_finite()) throw NonFiniteGradient(params.at(i).name);
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Array& p = params.at(i).value;
    Array& m = state.m[i];
    Array& v = state.v[i];
    const Array& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double clip_global_norm(GradientSet& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  const double norm = grads.global_norm();
  // Norms within rounding of max_norm are treated as already clipped, which
  // makes a second application a no-op.
  if (norm > max_norm * (1.0 + 1e-12)) {
    const double s = max_norm / norm;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      for (double& x : grads[i].data()) x *= s;
    }
  }
  return norm;
}

}  // namespace flowdpt::nd
