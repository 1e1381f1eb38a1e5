#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "knob/dynamics.hpp"
#include "knob/linalg.hpp"
#include "oracles.hpp"

using namespace knob;

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

// sigma(2/9) and sigma(2), evaluated to 15 significant digits offline.
constexpr double kSigmaTwoNinths = 0.555328055262369;
constexpr double kSigmaTwo = 0.880797077977882;

}  // namespace

TEST(BuildContinuous, UnitParameters) {
  const auto sys = build_continuous({1.0, 1.0, 1.0});
  EXPECT_EQ(sys.a(0, 0), 0.0);
  EXPECT_EQ(sys.a(0, 1), 1.0);
  EXPECT_EQ(sys.a(1, 0), -1.0);
  EXPECT_EQ(sys.a(1, 1), -2.0);
  EXPECT_EQ(sys.b[0], 0.0);
  EXPECT_EQ(sys.b[1], 1.0);
}

TEST(BuildContinuous, HalfDampedOmegaTwo) {
  const auto sys = build_continuous({0.5, 2.0, 0.1});
  EXPECT_EQ(sys.a(1, 0), -4.0);
  EXPECT_EQ(sys.a(1, 1), -2.0);
  EXPECT_EQ(sys.b[1], 4.0);
}

TEST(BuildContinuous, RejectsNonPositiveParameters) {
  auto field_of = [](SecondOrderParams p) {
    try {
      build_continuous(p);
    } catch (const ParameterError& e) {
      return e.field();
    }
    return std::string("<none>");
  };
  EXPECT_EQ(field_of({0.0, 1.0, 1.0}), "zeta");
  EXPECT_EQ(field_of({1.0, -1.0, 1.0}), "omega_n");
  EXPECT_EQ(field_of({1.0, 1.0, 0.0}), "dt");
  EXPECT_EQ(field_of({std::nan(""), 1.0, 1.0}), "zeta");
  EXPECT_EQ(field_of({1.0, std::numeric_limits<double>::infinity(), 1.0}), "omega_n");
}

TEST(Discretize, WorkedExampleMatchesHandComputation) {
  // (I - A/2)^-1 = (1/2.25) [[2, 0.5], [-0.5, 0.5]] for A = [[0,1],[-1,-2]].
  const auto d = discretize({1.0, 1.0, 1.0});
  EXPECT_NEAR(d.a_d(0, 0), 7.0 / 9.0, 4 * kEps);
  EXPECT_NEAR(d.a_d(0, 1), 4.0 / 9.0, 4 * kEps);
  EXPECT_NEAR(d.a_d(1, 0), -4.0 / 9.0, 4 * kEps);
  EXPECT_NEAR(d.a_d(1, 1), -1.0 / 9.0, 4 * kEps);
  EXPECT_NEAR(d.b_d[0], 2.0 / 9.0, 4 * kEps);
  EXPECT_NEAR(d.b_d[1], 4.0 / 9.0, 4 * kEps);

  const auto ev = eigenvalues(d.a_d);
  EXPECT_NEAR(ev[0].real(), 1.0 / 3.0, 4 * kEps);
  EXPECT_NEAR(ev[1].real(), 1.0 / 3.0, 4 * kEps);
  EXPECT_EQ(ev[0].imag(), 0.0);
  EXPECT_EQ(ev[1].imag(), 0.0);
  // Pole map of the repeated continuous pole s = -1.
  EXPECT_NEAR(oracle::bilinear(-1.0, 1.0).real(), 1.0 / 3.0, 4 * kEps);
}

TEST(Discretize, SmallStepApproachesIdentity) {
  const auto d = discretize({0.7, 3.0, 1e-9});
  EXPECT_NEAR(d.a_d(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(d.a_d(1, 1), 1.0, 1e-8);
  EXPECT_NEAR(d.a_d(0, 1), 0.0, 1e-8);
  EXPECT_NEAR(d.a_d(1, 0), 0.0, 1e-7);
  EXPECT_NEAR(d.b_d[0], 0.0, 1e-12);
  EXPECT_NEAR(d.b_d[1], 0.0, 1e-7);
}

TEST(Discretize, StoresParams) {
  const SecondOrderParams p{0.3, 2.5, 0.04};
  EXPECT_EQ(discretize(p).params, p);
}

TEST(Discretize, RejectsPolesRoundedOntoUnitCircle) {
  EXPECT_NO_THROW(discretize({1.0, 1e6, 1.0}));
  EXPECT_THROW(discretize({1.0, 1e17, 1.0}), SingularMatrixError);
  EXPECT_THROW(discretize({1e300, 1.0, 1.0}), SingularMatrixError);
}

TEST(SpectralRadius, TextbookMatrices) {
  EXPECT_DOUBLE_EQ(spectral_radius(Mat2::identity()), 1.0);
  EXPECT_DOUBLE_EQ(spectral_radius(Mat2{{0.0, 1.0, -1.0, 0.0}}), 1.0);
  const Mat2 worked = (1.0 / 2.25) * Mat2{{1.75, 1.0, -1.0, -0.25}};
  EXPECT_NEAR(spectral_radius(worked), 1.0 / 3.0, 4 * kEps);
  EXPECT_DOUBLE_EQ(spectral_radius(Mat2{{-3.0, 0.0, 0.0, 2.0}}), 3.0);
}

TEST(Step, ZeroIsAFixedPoint) {
  const auto d = discretize({0.4, 2.0, 0.1});
  EXPECT_EQ(step({}, d, 0.0), GateState{});
}

TEST(Step, FirstStepEqualsBdZero) {
  const auto d = discretize({1.0, 1.0, 1.0});
  const auto s = step({}, d, 1.0);
  EXPECT_NEAR(s.u, 2.0 / 9.0, 4 * kEps);
  EXPECT_NEAR(s.u_dot, 4.0 / 9.0, 4 * kEps);
}

TEST(Step, RejectsNonFiniteInput) {
  const auto d = discretize({1.0, 1.0, 1.0});
  EXPECT_THROW(step({std::nan(""), 0.0}, d, 1.0), ParameterError);
  EXPECT_THROW(step({}, d, std::numeric_limits<double>::infinity()), ParameterError);
}

TEST(Step, ConstantInputConvergesToIt) {
  const auto d = discretize({0.6, 1.5, 0.1});
  GateState x;
  for (int i = 0; i < 2000; ++i) x = step(x, d, 3.25);
  EXPECT_NEAR(x.u, 3.25, 1e-6);
  EXPECT_NEAR(x.u_dot, 0.0, 1e-6);
}

TEST(Step, IsBitDeterministic) {
  const auto d = discretize({0.37, 4.1, 0.013});
  const GateState a = step({0.123, -0.456}, d, 0.789);
  const GateState b = step({0.123, -0.456}, d, 0.789);
  EXPECT_EQ(std::memcmp(&a, &b, sizeof a), 0);
}

TEST(GateReadout, SigmoidValues) {
  EXPECT_EQ(gate_readout({0.0, 0.0}), 0.5);
  EXPECT_NEAR(gate_readout({2.0 / 9.0, 0.0}), kSigmaTwoNinths, 1e-15);
  EXPECT_LT(gate_readout({30.0, 0.0}), 1.0);
  EXPECT_GT(gate_readout({-30.0, 0.0}), 0.0);
  EXPECT_EQ(gate_readout({-800.0, 0.0}), 0.0);  // underflows cleanly, no inf/inf
  EXPECT_EQ(gate_readout({800.0, 0.0}), 1.0);
  for (double x : {-5.0, -0.3, 0.0, 0.7, 12.0}) EXPECT_NEAR(sigmoid(x), oracle::logistic(x), 1e-15);
}

TEST(InferGate, ResetZeroCommand) {
  const auto d = discretize({1.0, 1.0, 1.0});
  const auto out = infer_gate(0.0, d, InferenceMode::Reset, {5.0, 5.0});
  EXPECT_EQ(out.gate, 0.5);
  EXPECT_EQ(out.state, GateState{});
}

TEST(InferGate, ResetIgnoresSuppliedState) {
  const auto d = discretize({1.0, 1.0, 1.0});
  const auto out = infer_gate(1.0, d, InferenceMode::Reset, {3.0, -2.0});
  EXPECT_NEAR(out.gate, kSigmaTwoNinths, 1e-15);
}

TEST(InferGate, ContinuousConvergesToSigmoidOfCommand) {
  const auto d = discretize({1.0, 1.0, 0.5});
  GateState x;
  double g = 0.0;
  for (int i = 0; i < 500; ++i) {
    const auto out = infer_gate(2.0, d, InferenceMode::Continuous, x);
    x = out.state;
    g = out.gate;
  }
  EXPECT_NEAR(g, kSigmaTwo, 1e-12);
}

TEST(InferGate, ResetGateIsSigmoidOfShrunkCommandOnGrid) {
  for (double zeta : {0.05, 0.5, 1.0, 3.0}) {
    for (double wn : {0.1, 1.0, 10.0}) {
      for (double dt : {0.01, 0.1, 1.0}) {
        const SecondOrderParams p{zeta, wn, dt};
        const auto d = discretize(p);
        const double shrink = reset_shrinkage(p);
        EXPECT_NEAR(shrink, d.b_d[0], 1e-13 * std::max(1.0, shrink));
        EXPECT_GT(shrink, 0.0);
        // B_d[0] < 1 exactly when h = dt * omega_n stays below 2 * (zeta + sqrt(zeta^2 + 1)).
        const double h = dt * wn;
        if (h < 2.0 * (zeta + std::sqrt(zeta * zeta + 1.0))) {
          EXPECT_LT(shrink, 1.0);
        } else {
          EXPECT_GE(shrink, 1.0);
        }
        EXPECT_LT(shrink, 2.0);
        for (double u : {-3.0, 0.4, 2.5}) {
          EXPECT_EQ(infer_gate(u, d, InferenceMode::Reset, {}).gate, sigmoid(d.b_d[0] * u));
        }
      }
    }
  }
}

TEST(Ema, Cases) {
  EXPECT_EQ(ema_gate(0.3, 1.7, {1.0}), 1.7);
  EXPECT_EQ(ema_gate(0.0, 1.0, {0.5}), 0.5);
  EXPECT_THROW(ema_gate(0.0, 1.0, {0.0}), ParameterError);
  EXPECT_THROW(ema_gate(0.0, 1.0, {1.5}), ParameterError);
}

TEST(Ema, GeometricConvergenceRatio) {
  for (double alpha : {0.05, 0.3, 0.9, 1.0}) {
    double u = 0.0;
    double prev_err = 2.0;
    for (int i = 0; i < 50; ++i) {
      u = ema_gate(u, 2.0, {alpha});
      const double err = 2.0 - u;
      if (err > 1e-6) {
        // 2 - u loses digits as u approaches 2; allow a few ulp of 2 relative to err.
        EXPECT_NEAR(err / prev_err, 1.0 - alpha, 4e-15 / err);
      }
      prev_err = err;
    }
    if (alpha >= 0.3) {
      EXPECT_NEAR(u, 2.0, 1e-6);
    }
  }
}

TEST(ClassifyDamping, Regimes) {
  EXPECT_EQ(classify_damping({0.3, 1.0, 1.0}), DampingRegime::Underdamped);
  EXPECT_EQ(classify_damping({1.0, 1.0, 1.0}), DampingRegime::Critical);
  EXPECT_EQ(classify_damping({1.0 + 1e-12, 1.0, 1.0}), DampingRegime::Critical);
  EXPECT_EQ(classify_damping({2.0, 1.0, 1.0}), DampingRegime::Overdamped);
  EXPECT_EQ(to_string(DampingRegime::Critical), "critical");
}

TEST(Properties, StableForLogUniformParameters) {
  std::mt19937_64 gen(20240611);
  for (int i = 0; i < 10'000; ++i) {
    const SecondOrderParams p{oracle::log_uniform(gen, 1e-3, 1e3), oracle::log_uniform(gen, 1e-3, 1e3),
                              oracle::log_uniform(gen, 1e-3, 1e3)};
    const auto d = discretize(p);
    ASSERT_LT(spectral_radius(d.a_d), 1.0) << p.zeta << ' ' << p.omega_n << ' ' << p.dt;
  }
}

TEST(Properties, PoleMapMatchesBilinearImage) {
  std::mt19937_64 gen(77);
  for (int i = 0; i < 1000; ++i) {
    const SecondOrderParams p{oracle::log_uniform(gen, 1e-2, 1e2), oracle::log_uniform(gen, 1e-2, 1e2),
                              oracle::log_uniform(gen, 1e-3, 1e1)};
    const auto poles = oracle::continuous_poles(p.zeta, p.omega_n);
    const auto ev = eigenvalues(discretize(p).a_d);
    for (const auto& s : poles) {
      const auto z = oracle::bilinear(s, p.dt);
      const double err = std::min(std::abs(ev[0] - z), std::abs(ev[1] - z)) / std::abs(z);
      ASSERT_LT(err, 1e-9) << p.zeta << ' ' << p.omega_n << ' ' << p.dt;
    }
  }
}

TEST(Properties, UnitDcGainOnRandomStableDraws) {
  std::mt19937_64 gen(99);
  int checked = 0;
  while (checked < 200) {
    const SecondOrderParams p{oracle::log_uniform(gen, 1e-2, 1e2), oracle::log_uniform(gen, 1e-2, 1e2),
                              oracle::log_uniform(gen, 1e-2, 1e1)};
    const auto d = discretize(p);
    const double rho = spectral_radius(d.a_d);
    if (rho > 1.0 - 1e-3) continue;
    const int n = static_cast<int>(1.5 * std::log(1e-12) / std::log(std::max(rho, 1e-300))) + 64;
    GateState x;
    for (int i = 0; i < n; ++i) x = step(x, d, -1.5);
    ASSERT_NEAR(x.u, -1.5, 1e-6) << p.zeta << ' ' << p.omega_n << ' ' << p.dt;
    ++checked;
  }
}

TEST(Properties, BoundedResponseUnderBoundedInput) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> drive(-10.0, 10.0);
  for (const SecondOrderParams& p : {SecondOrderParams{0.01, 5.0, 0.1}, SecondOrderParams{1e-3, 1e3, 1e3},
                                     SecondOrderParams{50.0, 0.01, 1e-3}}) {
    const auto d = discretize(p);
    GateState x;
    double peak = 0.0;
    for (int i = 0; i < 100'000; ++i) {
      x = step(x, d, drive(gen));
      peak = std::max(peak, std::abs(x.u));
    }
    EXPECT_TRUE(std::isfinite(peak));
    EXPECT_TRUE(std::isfinite(x.u_dot));
  }
}
