#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowdpt/ndgrad/layers.hpp"

namespace flowdpt::flow {

// f_k = f_min * (f_max / f_min)^(k / (d_gamma/2 - 1)), k = 0 .. d_gamma/2 - 1.
std::vector<double> init_frequencies(double f_min, double f_max, std::size_t d_gamma);

// [sin(t f); cos(t f)] for t in [0, 1].
std::vector<double> gamma(double t, std::span<const double> f);

// Sinusoidal time embedding with learnable frequencies, stored as log f so
// they stay positive.
class TimeEmbedding {
 public:
  TimeEmbedding() = default;
  TimeEmbedding(nd::ParameterStore& store, std::size_t d_gamma, double f_min, double f_max);

  // t [n, 1] -> [n, d_gamma]
  nd::Var operator()(nd::Var t) const;
  std::size_t dim() const { return d_gamma_; }
  std::vector<double> frequencies() const;

 private:
  nd::Parameter* log_f_ = nullptr;
  std::size_t d_gamma_ = 0;
};

std::vector<double> interpolate(std::span<const double> x0, std::span<const double> a_star,
                                double t);

// v(gamma(t), h, x_t): three dense layers of width 4 * act_dim + 64.
class VectorField {
 public:
  VectorField() = default;
  VectorField(nd::ParameterStore& store, const std::string& group_id, std::size_t d_gamma,
              std::size_t d_model, std::size_t act_dim, nd::Activation act, Rng& rng);

  nd::Var operator()(nd::Var gamma, nd::Var h, nd::Var x) const;
  std::size_t act_dim() const { return act_dim_; }

 private:
  nd::Mlp net_;
  std::size_t act_dim_ = 0;
};

enum class Solver { heun, euler };

Solver parse_solver(const std::string& name);
std::string to_string(Solver s);

struct FlowConfig {
  std::size_t steps = 32;
  Solver solver = Solver::heun;
};

// Velocity of a batch of states at a common time; rows are independent.
using Velocity = std::function<nd::Array(double t, const nd::Array& x)>;

class NonFiniteState : public std::runtime_error {
 public:
  explicit NonFiniteState(std::size_t step)
      : std::runtime_error("flow integration produced a non-finite state at step " +
                           std::to_string(step)),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Integrates dx/dt = v(t, x) from t = 0 to 1 in `steps` uniform steps.
// Heun evaluates its corrector stage at t + dt.
nd::Array integrate(const Velocity& v, nd::Array x0, const FlowConfig& cfg);

// Draws n rows of x0 ~ N(0, I) and integrates each to t = 1.
nd::Array sample_actions(const Velocity& v, std::size_t act_dim, std::size_t n,
                         const FlowConfig& cfg, Rng& rng);
std::vector<double> sample_action(const Velocity& v, std::size_t act_dim, const FlowConfig& cfg,
                                  Rng& rng);

// The learned field conditioned on one hidden state h [1, d_model].
Velocity conditioned_field(const VectorField& field, const TimeEmbedding& time, nd::Array h);

struct RfNoise {
  nd::Array x0;  // [n, act_dim], standard normal
  nd::Array t;   // [n, 1], uniform on [0, 1)
};

RfNoise draw_rf_noise(std::size_t rows, std::size_t act_dim, Rng& rng);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using FieldNet = std::function<nd::Var(nd::Var gamma, nd::Var h, nd::Var x_t)>;

// Mean over rows of ||v(gamma(t), h, x_t) - (a* - x0)||^2 with
// x_t = (1 - t) x0 + t a*. Rows of h, a_star and the noise are aligned.
nd::Var rf_loss(const FieldNet& field, const TimeEmbedding& time, nd::Var h,
                const nd::Array& a_star, const RfNoise& noise);
nd::Var rf_loss(const VectorField& field, const TimeEmbedding& time, nd::Var h,
                const nd::Array& a_star, Rng& rng);

// Diagonal Gaussian action head used as the baseline.
class GaussianHead {
 public:
  static constexpr double kLogStdMin = -5.0;
  static constexpr double kLogStdMax = 2.0;

  struct Output {
    nd::Var mean;
    nd::Var log_std;  // clamped
  };

  GaussianHead() = default;
  GaussianHead(nd::ParameterStore& store, const std::string& group_id, std::size_t d_model,
               std::size_t act_dim, nd::Activation act, Rng& rng);

  Output operator()(nd::Var h) const;
  // Mean over rows of the negative log-likelihood of a_star.
  nd::Var nll(nd::Var h, const nd::Array& a_star) const;
  // Reparameterized samples, one per row of h [n, d_model].
  nd::Array sample(const nd::Array& h, Rng& rng) const;
  std::size_t act_dim() const { return act_dim_; }

 private:
  nd::Mlp net_;
  std::size_t act_dim_ = 0;
};

// Row-mean NLL of a under N(mean, diag(exp(log_std))^2), log_std clamped.
nd::Var gaussian_nll(nd::Var mean, nd::Var log_std, const nd::Array& a);

}  // namespace flowdpt::flow
