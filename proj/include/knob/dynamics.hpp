#pragma once

#include <cmath>
#include <string_view>

#include "knob/errors.hpp"
#include "knob/linalg.hpp"

namespace knob {

/// Physical knobs of the damped gate: damping ratio, natural frequency
/// (rad per unit time) and the integration step in the same time unit.
struct SecondOrderParams {
  double zeta = 1.0;
  double omega_n = 1.0;
  double dt = 1.0;

  void validate() const {
    check_positive("zeta", zeta);
    check_positive("omega_n", omega_n);
    check_positive("dt", dt);
  }

  friend bool operator==(const SecondOrderParams&, const SecondOrderParams&) = default;

 private:
  static void check_positive(const char* field, double value) {
    if (!std::isfinite(value)) throw ParameterError(field, "must be finite");
    if (!(value > 0.0)) throw ParameterError(field, "must be > 0");
  }
};

/// x' = A x + B u*, with x = [u, u'].
struct ContinuousSystem {
  Mat2 a;
  Vec2 b;
  SecondOrderParams params;
};

struct DiscreteSystem {
  Mat2 a_d;
  Vec2 b_d;
  SecondOrderParams params;
};

/// Latent gate state [u, u'].
struct GateState {
  double u = 0.0;
  double u_dot = 0.0;

  friend bool operator==(const GateState&, const GateState&) = default;
};

enum class InferenceMode { Reset, Continuous };

/// Smoothing coefficient of the first-order (EMA) gate.
struct EmaParams {
  double alpha = 0.3;

  void validate() const {
    if (!std::isfinite(alpha) || !(alpha > 0.0) || alpha > 1.0) {
      throw ParameterError("alpha", "must lie in (0, 1]");
    }
  }
};

enum class DampingRegime { Underdamped, Critical, Overdamped };

/// |zeta - 1| below this counts as critical damping.
inline constexpr double kCriticalDampingTolerance = 1e-9;

inline ContinuousSystem build_continuous(const SecondOrderParams& params) {
  params.validate();
  const double wn2 = params.omega_n * params.omega_n;
  ContinuousSystem sys;
  sys.a = Mat2{{0.0, 1.0, -wn2, -2.0 * params.zeta * params.omega_n}};
  sys.b = Vec2{{0.0, wn2}};
  sys.params = params;
  return sys;
}

/// Bilinear (Tustin) map:
///   A_d = (I - dt/2 A)^-1 (I + dt/2 A),  B_d = (I - dt/2 A)^-1 dt B.
inline DiscreteSystem discretize_tustin(const ContinuousSystem& sys, double dt) {
  if (!std::isfinite(dt) || !(dt > 0.0)) throw ParameterError("dt", "must be > 0");
  const Mat2 half = (0.5 * dt) * sys.a;
  const Mat2 lhs = Mat2::identity() - half;
  const Mat2 rhs = Mat2::identity() + half;
  const Mat2 lhs_inv = inverse(lhs);

  DiscreteSystem out;
  out.a_d = lhs_inv * rhs;
  out.b_d = lhs_inv * (dt * sys.b);
  out.params = sys.params;
  out.params.dt = dt;
  if (!all_finite(out.a_d) || !all_finite(out.b_d)) {
    throw SingularMatrixError("Tustin discretization produced non-finite matrices");
  }
  // Exact arithmetic keeps rho < 1; extreme dt * omega_n can round the poles onto the unit circle.
  if (!(spectral_radius(out.a_d) < 1.0)) {
    throw SingularMatrixError("Tustin poles rounded onto the unit circle; reduce dt * omega_n");
  }
  return out;
}

inline DiscreteSystem discretize(const SecondOrderParams& params) {
  return discretize_tustin(build_continuous(params), params.dt);
}

/// x_t = A_d x_{t-1} + B_d u*_t. Pure.
inline GateState step(const GateState& state, const DiscreteSystem& sys, double u_star) {
  if (!std::isfinite(state.u) || !std::isfinite(state.u_dot)) {
    throw ParameterError("state", "gate state must be finite");
  }
  if (!std::isfinite(u_star)) throw ParameterError("u_star", "must be finite");
  const Vec2 x{{state.u, state.u_dot}};
  const Vec2 ax = sys.a_d * x;
  return GateState{ax[0] + sys.b_d[0] * u_star, ax[1] + sys.b_d[1] * u_star};
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double gate_readout(const GateState& state) { return sigmoid(state.u); }

struct GateOutput {
  double gate;
  GateState state;
};

/// Reset mode: one step from the zero state, so g = sigma(B_d[0] * u*).
/// Continuous mode: one step from the supplied state.
inline GateOutput infer_gate(double u_star, const DiscreteSystem& sys, InferenceMode mode,
                             const GateState& state) {
  const GateState from = mode == InferenceMode::Reset ? GateState{} : state;
  const GateState next = step(from, sys, u_star);
  return GateOutput{gate_readout(next), next};
}

/// First-order smoothing of the latent command: (1 - alpha) prev + alpha u*.
inline double ema_gate(double prev_u, double u_star, const EmaParams& ema) {
  ema.validate();
  return (1.0 - ema.alpha) * prev_u + ema.alpha * u_star;
}

inline DampingRegime classify_damping(const SecondOrderParams& params) {
  params.validate();
  if (std::abs(params.zeta - 1.0) < kCriticalDampingTolerance) return DampingRegime::Critical;
  return params.zeta < 1.0 ? DampingRegime::Underdamped : DampingRegime::Overdamped;
}

inline std::string_view to_string(DampingRegime r) {
  switch (r) {
    case DampingRegime::Underdamped: return "underdamped";
    case DampingRegime::Critical: return "critical";
    case DampingRegime::Overdamped: return "overdamped";
  }
  return "unknown";
}

inline std::string_view to_string(InferenceMode m) {
  return m == InferenceMode::Reset ? "reset" : "continuous";
}

/// Closed form of B_d[0]: (dt^2 wn^2 / 2) / ((1 + dt zeta wn) + (dt wn / 2)^2).
inline double reset_shrinkage(const SecondOrderParams& p) {
  p.validate();
  const double h = p.dt * p.omega_n;
  return (0.5 * h * h) / ((1.0 + p.dt * p.zeta * p.omega_n) + 0.25 * h * h);
}

/// Slowest continuous decay rate, i.e. -max Re(s) over the two poles.
inline double slowest_decay_rate(const SecondOrderParams& p) {
  if (p.zeta <= 1.0) return p.zeta * p.omega_n;
  // zeta*wn - wn*sqrt(zeta^2 - 1), written without cancellation.
  return p.omega_n / (p.zeta + std::sqrt(p.zeta * p.zeta - 1.0));
}

}  // namespace knob
