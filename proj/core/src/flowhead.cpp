#include "flowdpt/flowhead.hpp"

#include <cmath>
#include <numbers>

#include "flowdpt/ndgrad/ops.hpp"

namespace flowdpt::flow {

std::vector<double> init_frequencies(double f_min, double f_max, std::size_t d_gamma) {
  if (!(f_min > 0.0) || !(f_max > f_min)) {
    throw std::invalid_argument("init_frequencies: need 0 < f_min < f_max");
  }
  if (d_gamma < 4 || d_gamma % 2 != 0) {
    throw std::invalid_argument("init_frequencies: d_gamma must be even and >= 4");
  }
  const std::size_t half = d_gamma / 2;
  std::vector<double> f(half);
  for (std::size_t k = 0; k < half; ++k) {
    f[k] = f_min * std::pow(f_max / f_min, static_cast<double>(k) / static_cast<double>(half - 1));
  }
  return f;
}

std::vector<double> gamma(double t, std::span<const double> f) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("gamma: t must lie in [0, 1]");
  std::vector<double> out(2 * f.size());
  for (std::size_t k = 0; k < f.size(); ++k) {
    out[k] = std::sin(t * f[k]);
    out[f.size() + k] = std::cos(t * f[k]);
  }
  return out;
}

TimeEmbedding::TimeEmbedding(nd::ParameterStore& store, std::size_t d_gamma, double f_min,
                             double f_max)
    : d_gamma_(d_gamma) {
  auto f = init_frequencies(f_min, f_max, d_gamma);
  for (double& x : f) x = std::log(x);
  log_f_ = &store.add("time.log_f", nd::Array::row(f));
}

nd::Var TimeEmbedding::operator()(nd::Var t) const {
  if (t.cols() != 1) throw nd::ShapeError("TimeEmbedding", {t.rows(), 1}, t.shape());
  for (double x : t.value().data()) {
    if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("TimeEmbedding: t must lie in [0, 1]");
  }
  nd::Graph& g = t.graph();
  nd::Var tf = nd::matmul(t, nd::exp(g.param(*log_f_)));
  const nd::Var parts[] = {nd::sin(tf), nd::cos(tf)};
  return nd::concat_cols(parts);
}

std::vector<double> TimeEmbedding::frequencies() const {
  std::vector<double> f(log_f_->value.data().begin(), log_f_->value.data().end());
  for (double& x : f) x = std::exp(x);
  return f;
}

std::vector<double> interpolate(std::span<const double> x0, std::span<const double> a_star,
                                double t) {
  if (x0.size() != a_star.size()) {
    throw nd::ShapeError("interpolate", {1, x0.size()}, {1, a_star.size()});
  }
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * a_star[i];
  return out;
}

VectorField::VectorField(nd::ParameterStore& store, const std::string& group_id,
                         std::size_t d_gamma, std::size_t d_model, std::size_t act_dim,
                         nd::Activation act, Rng& rng)
    : act_dim_(act_dim) {
  const std::size_t hidden = 4 * act_dim + 64;
  net_ = nd::Mlp(store, "flow." + group_id, {d_gamma + d_model + act_dim, hidden, hidden, act_dim},
                 act, rng);
}

nd::Var VectorField::operator()(nd::Var gamma, nd::Var h, nd::Var x) const {
  const nd::Var parts[] = {gamma, h, x};
  return net_(nd::concat_cols(parts));
}

Solver parse_solver(const std::string& name) {
  if (name == "heun") return Solver::heun;
  if (name == "euler") return Solver::euler;
  throw std::invalid_argument("unknown solver '" + name + "' (expected heun or euler)");
}

std::string to_string(Solver s) { return s == Solver::heun ? "heun" : "euler"; }

nd::Array integrate(const Velocity& v, nd::Array x, const FlowConfig& cfg) {
  if (cfg.steps == 0) throw std::invalid_argument("integrate: steps must be at least 1");
  const double dt = 1.0 / static_cast<double>(cfg.steps);
  auto check = [&](const nd::Array& a, const nd::Array& ref, std::size_t step) {
    if (a.shape() != ref.shape()) throw nd::ShapeError("integrate(velocity)", ref.shape(), a.shape());
    if (!a.all_finite()) throw NonFiniteState(step);
  };
  for (std::size_t m = 0; m < cfg.steps; ++m) {
    const double t = static_cast<double>(m) * dt;
    const nd::Array k1 = v(t, x);
    check(k1, x, m);
    if (cfg.solver == Solver::euler) {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += dt * k1[i];
    } else {
      nd::Array pred = x;
      for (std::size_t i = 0; i < x.size(); ++i) pred[i] += dt * k1[i];
      const nd::Array k2 = v(std::min(t + dt, 1.0), pred);
      check(k2, x, m);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += 0.5 * (k1[i] + k2[i]) * dt;
    }
    if (!x.all_finite()) throw NonFiniteState(m);
  }
  return x;
}

nd::Array sample_actions(const Velocity& v, std::size_t act_dim, std::size_t n,
                         const FlowConfig& cfg, Rng& rng) {
  nd::Array x0({n, act_dim});
  for (double& x : x0.data()) x = rng.normal();
  return integrate(v, std::move(x0), cfg);
}

std::vector<double> sample_action(const Velocity& v, std::size_t act_dim, const FlowConfig& cfg,
                                  Rng& rng) {
  return sample_actions(v, act_dim, 1, cfg, rng).row_vector(0);
}

Velocity conditioned_field(const VectorField& field, const TimeEmbedding& time, nd::Array h) {
  if (h.rows() != 1) throw nd::ShapeError("conditioned_field(h)", {1, h.cols()}, h.shape());
  return [&field, &time, h = std::move(h)](double t, const nd::Array& x) {
    nd::Graph g(nd::GradMode::disabled);
    const std::size_t n = x.rows();
    nd::Var gam = time(g.input(nd::Array({n, 1}, t)));
    nd::Var hv = nd::broadcast_rows(g.input(h), n);
    return field(gam, hv, g.input(x)).value();
  };
}

RfNoise draw_rf_noise(std::size_t rows, std::size_t act_dim, Rng& rng) {
  RfNoise n{nd::Array({rows, act_dim}), nd::Array({rows, 1})};
  for (double& x : n.x0.data()) x = rng.normal();
  for (double& t : n.t.data()) t = rng.uniform();
  return n;
}

nd::Var rf_loss(const FieldNet& field, const TimeEmbedding& time, nd::Var h,
                const nd::Array& a_star, const RfNoise& noise) {
  const std::size_t n = h.rows();
  if (a_star.rows() != n) throw nd::ShapeError("rf_loss(a_star)", {n, a_star.cols()}, a_star.shape());
  if (noise.x0.shape() != a_star.shape()) throw nd::ShapeError("rf_loss(x0)", a_star.shape(), noise.x0.shape());
  if (noise.t.shape() != nd::Shape{n, 1}) throw nd::ShapeError("rf_loss(t)", {n, 1}, noise.t.shape());

  const std::size_t a = a_star.cols();
  nd::Array x_t(a_star.shape());
  nd::Array target(a_star.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double t = noise.t[r];
    for (std::size_t c = 0; c < a; ++c) {
      const double x0 = noise.x0.at(r, c);
      const double a1 = a_star.at(r, c);
      x_t.at(r, c) = (1.0 - t) * x0 + t * a1;
      target.at(r, c) = a1 - x0;
    }
  }
  nd::Graph& g = h.graph();
  nd::Var pred = field(time(g.input(noise.t)), h, g.input(std::move(x_t)));
  nd::Var loss = nd::scale(nd::sum(nd::square(nd::sub(pred, g.input(std::move(target))))),
                           1.0 / static_cast<double>(n));
  if (!std::isfinite(loss.value().item())) {
    throw NonFiniteLoss("rf_loss is non-finite (value " + std::to_string(loss.value().item()) +
                        ", rows " + std::to_string(n) + ")");
  }
  return loss;
}

nd::Var rf_loss(const VectorField& field, const TimeEmbedding& time, nd::Var h,
                const nd::Array& a_star, Rng& rng) {
  const RfNoise noise = draw_rf_noise(a_star.rows(), a_star.cols(), rng);
  return rf_loss([&field](nd::Var gm, nd::Var hv, nd::Var x) { return field(gm, hv, x); }, time, h,
                 a_star, noise);
}

GaussianHead::GaussianHead(nd::ParameterStore& store, const std::string& group_id,
                           std::size_t d_model, std::size_t act_dim, nd::Activation act, Rng& rng)
    : act_dim_(act_dim) {
  const std::size_t hidden = 4 * act_dim + 64;
  net_ = nd::Mlp(store, "gauss." + group_id, {d_model, hidden, hidden, 2 * act_dim}, act, rng);
}

GaussianHead::Output GaussianHead::operator()(nd::Var h) const {
  nd::Var out = net_(h);
  return {nd::slice_cols(out, 0, act_dim_),
          nd::clamp(nd::slice_cols(out, act_dim_, 2 * act_dim_), kLogStdMin, kLogStdMax)};
}

nd::Var gaussian_nll(nd::Var mean, nd::Var log_std, const nd::Array& a) {
  if (mean.shape() != a.shape()) throw nd::ShapeError("gaussian_nll", mean.shape(), a.shape());
  nd::Graph& g = mean.graph();
  nd::Var ls = nd::clamp(log_std, GaussianHead::kLogStdMin, GaussianHead::kLogStdMax);
  nd::Var z = nd::mul(nd::sub(g.input(a), mean), nd::exp(nd::scale(ls, -1.0)));
  nd::Var per_elem = nd::add(nd::scale(nd::square(z), 0.5), ls);
  const double rows = static_cast<double>(a.rows());
  const double log_norm = 0.5 * std::log(2.0 * std::numbers::pi) * static_cast<double>(a.cols());
  return nd::add_scalar(nd::scale(nd::sum(per_elem), 1.0 / rows), log_norm);
}

nd::Var GaussianHead::nll(nd::Var h, const nd::Array& a_star) const {
  Output o = (*this)(h);
  return gaussian_nll(o.mean, o.log_std, a_star);
}

nd::Array GaussianHead::sample(const nd::Array& h, Rng& rng) const {
  nd::Graph g(nd::GradMode::disabled);
  Output o = (*this)(g.input(h));
  nd::Array out = o.mean.value();
  const nd::Array& ls = o.log_std.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += std::exp(ls[i]) * rng.normal();
  return out;
}

}  // namespace flowdpt::flow
