#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "flowdpt/flowhead.hpp"
#include "flowdpt/ndgrad/adam.hpp"
#include "flowdpt/ndgrad/ops.hpp"
#include "support/test_support.hpp"

namespace flowdpt::flow {
namespace {

using flowdpt::testing::random_array;

TEST(FrequencyTest, EndpointsAndGeometricMidpoint) {
  const auto f4 = init_frequencies(1.0, 100.0, 4);
  ASSERT_EQ(f4.size(), 2u);
  EXPECT_NEAR(f4[0], 1.0, 1e-12);
  EXPECT_NEAR(f4[1], 100.0, 1e-12);
  const auto f6 = init_frequencies(1.0, 100.0, 6);
  ASSERT_EQ(f6.size(), 3u);
  EXPECT_NEAR(f6[1], 10.0, 1e-12);
  EXPECT_NEAR(f6[2], 100.0, 1e-12);
}

TEST(FrequencyTest, ConsecutiveRatiosAreEqual) {
  const auto f = init_frequencies(0.5, 1000.0, 32);
  ASSERT_EQ(f.size(), 16u);
  const double r = f[1] / f[0];
  for (std::size_t k = 1; k + 1 < f.size(); ++k) EXPECT_NEAR(f[k + 1] / f[k], r, 1e-12);
}

TEST(FrequencyTest, InvalidBoundsRejected) {
  EXPECT_THROW(init_frequencies(0.0, 10.0, 4), std::invalid_argument);
  EXPECT_THROW(init_frequencies(10.0, 1.0, 4), std::invalid_argument);
  EXPECT_THROW(init_frequencies(1.0, 10.0, 5), std::invalid_argument);
  EXPECT_THROW(init_frequencies(1.0, 10.0, 2), std::invalid_argument);
}

TEST(GammaTest, KnownValues) {
  const std::vector<double> f{1.0, 7.0, 30.0};
  EXPECT_EQ(gamma(0.0, f), (std::vector<double>{0, 0, 0, 1, 1, 1}));
  const auto g = gamma(1.0, std::vector<double>{std::numbers::pi / 2});
  EXPECT_NEAR(g[0], 1.0, 1e-15);
  EXPECT_NEAR(g[1], 0.0, 1e-15);
  EXPECT_THROW(gamma(1.5, f), std::invalid_argument);
  EXPECT_THROW(gamma(-0.1, f), std::invalid_argument);
}

TEST(GammaTest, SquaredNormIsHalfTheWidth) {
  const auto f = init_frequencies(1.0, 1000.0, 32);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto g = gamma(rng.uniform(), f);
    double sq = 0.0;
    for (double x : g) sq += x * x;
    EXPECT_NEAR(sq, 16.0, 1e-12);
  }
}

TEST(TimeEmbeddingTest, MatchesGammaAndKeepsFrequenciesPositive) {
  nd::ParameterStore store;
  TimeEmbedding time(store, 8, 1.0, 50.0);
  const auto f = time.frequencies();
  const auto ref = init_frequencies(1.0, 50.0, 8);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(f[k], ref[k], 1e-12);
  nd::Graph g;
  const auto emb = time(g.input(nd::Array({2, 1}, std::vector<double>{0.25, 0.8}))).value();
  const auto g1 = gamma(0.8, f);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(emb.at(1, k), g1[k], 1e-12);
  store.get("time.log_f").value.fill(-30.0);
  for (double x : time.frequencies()) EXPECT_GT(x, 0.0);
}

TEST(InterpolateTest, Endpoints) {
  const std::vector<double> x0{0.3, -0.4}, a{2.0, -2.0};
  EXPECT_EQ(interpolate(x0, a, 0.0), x0);
  EXPECT_EQ(interpolate(x0, a, 1.0), a);
  EXPECT_EQ(interpolate(std::vector<double>{0, 0}, a, 0.5), (std::vector<double>{1.0, -1.0}));
}

struct LossFixture : ::testing::Test {
  nd::ParameterStore store;
  TimeEmbedding time{store, 8, 1.0, 100.0};
  nd::Array a_star = nd::Array::matrix(3, 2, {1.0, -2.0, 0.5, 0.25, -1.5, 3.0});
  RfNoise noise{nd::Array::matrix(3, 2, {0.2, 0.1, -0.7, 1.1, 0.0, -0.3}),
                nd::Array::matrix(3, 1, {0.1, 0.5, 0.9})};
};

TEST_F(LossFixture, ExactFieldGivesZeroLoss) {
  nd::Array target(a_star.shape());
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = a_star[i] - noise.x0[i];
  nd::Graph g;
  FieldNet rig = [&](nd::Var, nd::Var, nd::Var x) { return x.graph().input(target); };
  const double loss = rf_loss(rig, time, g.input(nd::Array({3, 4})), a_star, noise).value().item();
  EXPECT_EQ(loss, 0.0);
}

TEST_F(LossFixture, ZeroFieldMatchesHandComputedMean) {
  FieldNet zero = [](nd::Var, nd::Var, nd::Var x) { return nd::scale(x, 0.0); };
  // Rows: (1-0.2)^2+(-2-0.1)^2, (0.5+0.7)^2+(0.25-1.1)^2, (-1.5-0)^2+(3+0.3)^2
  const double expected = ((0.64 + 4.41) + (1.44 + 0.7225) + (2.25 + 10.89)) / 3.0;
  nd::Graph g;
  const double loss = rf_loss(zero, time, g.input(nd::Array({3, 4})), a_star, noise).value().item();
  EXPECT_NEAR(loss, expected, 1e-12);

  RfNoise same{a_star, noise.t};
  nd::Graph g2;
  EXPECT_EQ(rf_loss(zero, time, g2.input(nd::Array({3, 4})), a_star, same).value().item(), 0.0);
}

TEST_F(LossFixture, FieldSeesInterpolatedStateAndTimeEmbedding) {
  nd::Graph g;
  FieldNet probe = [&](nd::Var gam, nd::Var, nd::Var x) {
    for (std::size_t r = 0; r < 3; ++r) {
      const double t = noise.t[r];
      for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_NEAR(x.value().at(r, c), (1 - t) * noise.x0.at(r, c) + t * a_star.at(r, c), 1e-15);
      }
      const auto ref = gamma(t, time.frequencies());
      for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(gam.value().at(r, k), ref[k], 1e-12);
    }
    return x;
  };
  rf_loss(probe, time, g.input(nd::Array({3, 4})), a_star, noise);
}

TEST(RfLossTest, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  nd::ParameterStore store;
  TimeEmbedding time(store, 8, 1.0, 20.0);
  VectorField field(store, "g", 8, 6, 2, nd::Activation::gelu, rng);
  auto& h = store.add("h", random_array(4, 6, rng));
  const auto a_star = random_array(4, 2, rng);
  const RfNoise noise = draw_rf_noise(4, 2, rng);
  FieldNet net = [&](nd::Var gm, nd::Var hv, nd::Var x) { return field(gm, hv, x); };
  const auto r = flowdpt::testing::check_gradients(store, [&](nd::Graph& g) {
    return rf_loss(net, time, g.param(h), a_star, noise);
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(RfLossTest, NoiseDrawIsReproducible) {
  Rng a(4), b(4);
  const auto n1 = draw_rf_noise(5, 3, a), n2 = draw_rf_noise(5, 3, b);
  EXPECT_EQ(n1.x0, n2.x0);
  EXPECT_EQ(n1.t, n2.t);
  for (double t : n1.t.data()) {
    EXPECT_GE(t, 0.0);
    EXPECT_LT(t, 1.0);
  }
}

TEST(SolverTest, ConstantFieldIsExactInOneHeunStep) {
  const nd::Array c = nd::Array::row({0.7, -1.3});
  Velocity v = [&](double, const nd::Array& x) {
    nd::Array out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t k = 0; k < x.cols(); ++k) out.at(r, k) = c[k];
    }
    return out;
  };
  Rng rng(5), copy(5);
  const auto x = sample_action(v, 2, {1, Solver::heun}, rng);
  const double x0a = copy.normal(), x0b = copy.normal();
  EXPECT_NEAR(x[0], x0a + 0.7, 1e-15);
  EXPECT_NEAR(x[1], x0b - 1.3, 1e-15);
}

TEST(SolverTest, ZeroFieldReturnsNoise) {
  Velocity v = [](double, const nd::Array& x) { return nd::Array(x.shape(), 0.0); };
  Rng rng(6), copy(6);
  const auto x = sample_actions(v, 3, 4, {32, Solver::heun}, rng);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], copy.normal());
}

TEST(SolverTest, HeunCorrectorIsEvaluatedAtNextGridPoint) {
  std::vector<double> times;
  Velocity v = [&](double t, const nd::Array& x) {
    times.push_back(t);
    return nd::Array(x.shape(), t);
  };
  const auto x = integrate(v, nd::Array::scalar(0.0), {4, Solver::heun});
  const std::vector<double> expected{0.0, 0.25, 0.25, 0.5, 0.5, 0.75, 0.75, 1.0};
  ASSERT_EQ(times.size(), expected.size());
  for (std::size_t i = 0; i < times.size(); ++i) EXPECT_NEAR(times[i], expected[i], 1e-15);
  // Trapezoidal rule is exact for a linear velocity: integral of t is 1/2.
  EXPECT_NEAR(x.item(), 0.5, 1e-15);
}

double decay_error(std::size_t steps, Solver solver) {
  Velocity v = [](double, const nd::Array& x) {
    nd::Array out = x;
    for (double& e : out.data()) e = -e;
    return out;
  };
  return std::abs(integrate(v, nd::Array::scalar(1.0), {steps, solver}).item() - std::exp(-1.0));
}

TEST(SolverTest, ConvergenceOrdersOnLinearDecay) {
  for (std::size_t m : {8u, 16u, 32u}) {
    const double heun = decay_error(m, Solver::heun) / decay_error(2 * m, Solver::heun);
    const double euler = decay_error(m, Solver::euler) / decay_error(2 * m, Solver::euler);
    EXPECT_NEAR(heun, 4.0, 0.5) << "M=" << m;
    EXPECT_NEAR(euler, 2.0, 0.3) << "M=" << m;
  }
}

TEST(SolverTest, NonFiniteStateCarriesStep) {
  Velocity v = [](double t, const nd::Array& x) {
    return nd::Array(x.shape(), t >= 0.5 ? std::numeric_limits<double>::infinity() : 1.0);
  };
  try {
    integrate(v, nd::Array::scalar(0.0), {4, Solver::euler});
    FAIL() << "expected NonFiniteState";
  } catch (const NonFiniteState& e) {
    EXPECT_EQ(e.step(), 2u);
  }
  EXPECT_THROW(integrate(v, nd::Array::scalar(0.0), {0, Solver::euler}), std::invalid_argument);
}

TEST(SolverTest, ParseRoundTrip) {
  EXPECT_EQ(parse_solver("heun"), Solver::heun);
  EXPECT_EQ(parse_solver(to_string(Solver::euler)), Solver::euler);
  EXPECT_THROW(parse_solver("rk4"), std::invalid_argument);
}

TEST(GaussianTest, StandardNormalAtZero) {
  nd::Graph g;
  const double nll = gaussian_nll(g.input(nd::Array({1, 3})), g.input(nd::Array({1, 3})),
                                  nd::Array({1, 3})).value().item();
  EXPECT_NEAR(nll, 0.5 * 3 * std::log(2 * std::numbers::pi), 1e-14);
}

TEST(GaussianTest, ClampedStdBoundsTheNll) {
  const nd::Array a = nd::Array::row({0.4, -0.2});
  const double bound = 2 * GaussianHead::kLogStdMin + std::log(2 * std::numbers::pi);
  for (double ls : {-5.0, -8.0, -50.0}) {
    nd::Graph g;
    const double nll = gaussian_nll(g.input(a), g.input(nd::Array({1, 2}, ls)), a).value().item();
    EXPECT_NEAR(nll, bound, 1e-12);
  }
  nd::Graph g;
  const double off = gaussian_nll(g.input(nd::Array::row({0.5, -0.2})), g.input(nd::Array({1, 2}, -5.0)), a)
                         .value()
                         .item();
  EXPECT_GT(off, bound);
}

TEST(GaussianTest, MeanGradientIsTheOffset) {
  const double delta = 0.37;
  nd::ParameterStore store;
  auto& mean = store.add("mean", nd::Array::scalar(1.0 + delta));
  nd::Graph g;
  g.backward(gaussian_nll(g.param(mean), g.input(nd::Array::scalar(0.0)), nd::Array::scalar(1.0)));
  EXPECT_NEAR(g.gradient(mean).item(), delta, 1e-14);
  const auto r = flowdpt::testing::check_gradients(store, [&](nd::Graph& gg) {
    return gaussian_nll(gg.param(mean), gg.input(nd::Array::scalar(0.0)), nd::Array::scalar(1.0));
  });
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GaussianTest, HeadClampsAndSamplesByReparameterization) {
  Rng rng(8);
  nd::ParameterStore store;
  GaussianHead head(store, "g", 4, 1, nd::Activation::gelu, rng);
  // Silence the hidden layers so the output equals the last bias.
  for (std::size_t i = 0; i < store.size(); ++i) store.at(i).value.fill(0.0);
  store.get("gauss.g.2.b").value = nd::Array::row({0.8, 9.0});
  nd::Graph g;
  const auto out = head(g.input(nd::Array({1, 4})));
  EXPECT_EQ(out.mean.value().item(), 0.8);
  EXPECT_EQ(out.log_std.value().item(), GaussianHead::kLogStdMax);

  store.get("gauss.g.2.b").value = nd::Array::row({0.8, std::log(0.5)});
  const auto draws = head.sample(nd::Array({20000, 4}), rng);
  double s = 0.0, s2 = 0.0;
  for (double x : draws.data()) {
    s += x;
    s2 += x * x;
  }
  const double m = s / 20000, var = s2 / 20000 - m * m;
  EXPECT_NEAR(m, 0.8, 0.02);
  EXPECT_NEAR(std::sqrt(var), 0.5, 0.02);
}

// Unconditional two-mode target: every row of h is the same constant, so
// the field must transport N(0, 1) onto {-1, +1} on its own.
TEST(FlowTrainingTest, CoversBothModesOfABimodalTarget) {
  Rng rng(9);
  nd::ParameterStore store;
  TimeEmbedding time(store, 16, 1.0, 100.0);
  VectorField field(store, "g", 16, 4, 1, nd::Activation::gelu, rng);
  nd::AdamState adam(store);
  nd::AdamConfig cfg;
  cfg.lr = 2e-3;
  const std::size_t batch = 128;
  const nd::Array h({batch, 4}, 1.0);
  for (int step = 0; step < 2500; ++step) {
    nd::Array target({batch, 1});
    for (double& a : target.data()) a = rng.uniform() < 0.5 ? -1.0 : 1.0;
    nd::Graph g;
    nd::Var loss = rf_loss(field, time, g.input(h), target, rng);
    g.backward(loss);
    nd::GradientSet grads(store);
    g.accumulate_gradients(grads);
    nd::clip_global_norm(grads, 2.5);
    nd::adam_step(store, grads, adam, cfg);
  }
  Rng draw(10);
  const auto x = sample_actions(conditioned_field(field, time, nd::Array({1, 4}, 1.0)), 1, 1000,
                                FlowConfig{}, draw);
  std::size_t near = 0, plus = 0, minus = 0;
  for (double a : x.data()) {
    if (std::abs(a - 1.0) < 0.2) ++plus;
    if (std::abs(a + 1.0) < 0.2) ++minus;
  }
  near = plus + minus;
  EXPECT_GE(near, 950u);
  EXPECT_GE(plus, 350u);
  EXPECT_LE(plus, 650u);
  EXPECT_GE(minus, 350u);
  EXPECT_LE(minus, 650u);
}

}  // namespace
}  // namespace flowdpt::flow
