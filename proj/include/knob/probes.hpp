#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "knob/dynamics.hpp"
#include "knob/errors.hpp"
#include "knob/fusion.hpp"
#include "knob/random.hpp"

namespace knob {

// ---------------------------------------------------------------------------
// Step response
// ---------------------------------------------------------------------------

struct StepMetrics {
  double overshoot_fraction = 0.0;
  double settling_time_2pct = 0.0;  // time units; equals the horizon when unsettled
  double rise_time_10_90 = 0.0;     // time units
  double steady_state_value = 0.0;
  bool settled = false;
};

struct StepResponse {
  std::vector<double> u;  // u[i] is the latent displacement at time i * dt; u[0] = 0
  StepMetrics metrics;
};

struct StepOptions {
  double settle_band = 0.02;  // fraction of the amplitude
  double rise_low = 0.1;
  double rise_high = 0.9;
};

/// Steps needed for the slowest discrete mode to decay below `tol`, plus a
/// margin for the polynomial factor of a (near) repeated root.
inline std::size_t recommended_horizon(const DiscreteSystem& sys, double tol = 1e-10,
                                       std::size_t cap = 50'000'000) {
  const double rho = spectral_radius(sys.a_d);
  if (!(rho < 1.0)) throw ParameterError("system", "discrete system is not stable");
  if (rho == 0.0) return 16;
  const double n = std::log(tol) / std::log(rho);
  const double padded = 1.5 * n + 64.0;
  return padded >= static_cast<double>(cap) ? cap : static_cast<std::size_t>(std::ceil(padded));
}

namespace detail {

/// Time (in steps, fractional) at which y first reaches `level`, by linear
/// interpolation between samples.
inline std::optional<double> first_crossing(std::span<const double> y, double level) {
  for (std::size_t i = 1; i < y.size(); ++i) {
    if (y[i] >= level) {
      const double span = y[i] - y[i - 1];
      const double frac = span > 0.0 ? (level - y[i - 1]) / span : 0.0;
      return static_cast<double>(i - 1) + std::clamp(frac, 0.0, 1.0);
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// Applies u* = amplitude from the zero state for `horizon` steps.
inline StepResponse step_response(const DiscreteSystem& sys, double amplitude, std::size_t horizon,
                                  const StepOptions& opt = {}) {
  if (!std::isfinite(amplitude) || amplitude == 0.0) throw ParameterError("amplitude", "must be finite and non-zero");
  if (horizon < 2) throw ParameterError("horizon", "must be >= 2");
  StepResponse out;
  out.u.reserve(horizon + 1);
  GateState x;
  out.u.push_back(x.u);
  for (std::size_t i = 0; i < horizon; ++i) {
    x = step(x, sys, amplitude);
    out.u.push_back(x.u);
  }

  // Work on the response normalised by the amplitude so negative steps behave.
  std::vector<double> y(out.u.size());
  std::transform(out.u.begin(), out.u.end(), y.begin(), [&](double v) { return v / amplitude; });
  const double ys = y.back();
  const double dt = sys.params.dt;

  StepMetrics& m = out.metrics;
  m.steady_state_value = out.u.back();
  const double peak = *std::max_element(y.begin(), y.end());
  m.overshoot_fraction = ys != 0.0 ? std::max(0.0, (peak - ys) / std::abs(ys)) : 0.0;

  std::size_t settle_idx = 0;
  for (std::size_t i = y.size(); i-- > 0;) {
    if (std::abs(y[i] - ys) > opt.settle_band) {
      settle_idx = i + 1;
      break;
    }
  }
  m.settling_time_2pct = static_cast<double>(settle_idx) * dt;
  m.settled = static_cast<double>(settle_idx) <= 0.9 * static_cast<double>(horizon);
  if (!m.settled) m.settling_time_2pct = static_cast<double>(horizon) * dt;

  const auto lo = detail::first_crossing(y, opt.rise_low * ys);
  const auto hi = detail::first_crossing(y, opt.rise_high * ys);
  m.rise_time_10_90 = (lo && hi) ? (*hi - *lo) * dt : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Frequency response
// ---------------------------------------------------------------------------

inline constexpr double kNyquist = 0.5;  // cycles per step

struct BodePoint {
  double frequency = 0.0;       // cycles per step
  double magnitude_db = 0.0;    // relative to the lowest-frequency point
  double sem = 0.0;             // standard error over realizations, dB
  double gain_db = 0.0;         // absolute |u| / |u*| amplitude ratio, dB
  double g_magnitude_db = 0.0;  // post-sigmoid gate, relative to its own reference
};

struct BodeOptions {
  double amplitude = 1.0;
  double cycles_per_point = 5.0;
  std::size_t realizations = 1;
  double noise_sd = 0.0;          // additive N(0, sd^2) on the drive
  std::uint64_t seed = 0;
  double transient_tol = 1e-7;    // discard until rho^n falls below this
};

/// Continuous frequency (rad per time unit) of a drive at f cycles per step.
inline double frequency_to_omega(double f, double dt) { return 2.0 * std::numbers::pi * f / dt; }

/// Tustin pre-warp: the continuous frequency the bilinear map sends to the
/// discrete frequency of the drive, (2/dt) tan(omega dt / 2).
inline double warped_omega(double f, double dt) { return (2.0 / dt) * std::tan(std::numbers::pi * f); }

/// |H(j omega)| = wn^2 / sqrt((wn^2 - omega^2)^2 + (2 zeta wn omega)^2).
inline double analytic_magnitude(const SecondOrderParams& p, double omega) {
  const double wn2 = p.omega_n * p.omega_n;
  const double re = wn2 - omega * omega;
  const double im = 2.0 * p.zeta * p.omega_n * omega;
  return wn2 / std::hypot(re, im);
}

/// Analytic continuous magnitude at the warped frequency, in dB relative to
/// the same quantity at f_ref.
inline double analytic_warped_db(const SecondOrderParams& p, double f, double f_ref) {
  return 20.0 * std::log10(analytic_magnitude(p, warped_omega(f, p.dt)) /
                           analytic_magnitude(p, warped_omega(f_ref, p.dt)));
}

/// Exact gain of the recursion x_t = A_d x_{t-1} + B_d u_t to the u component:
/// [(I - A_d e^{-j Omega})^{-1} B_d]_0 with Omega = 2 pi f.
inline double discrete_gain(const DiscreteSystem& sys, double f) {
  using C = std::complex<double>;
  const C zinv = std::polar(1.0, -2.0 * std::numbers::pi * f);
  const C m00 = 1.0 - sys.a_d(0, 0) * zinv, m01 = -sys.a_d(0, 1) * zinv;
  const C m10 = -sys.a_d(1, 0) * zinv, m11 = 1.0 - sys.a_d(1, 1) * zinv;
  const C det = m00 * m11 - m01 * m10;
  const C x0 = (m11 * sys.b_d[0] - m01 * sys.b_d[1]) / det;
  return std::abs(x0);
}

namespace detail {

/// Least-squares amplitude of y_t ~ a sin(w t) + b cos(w t) + c over t = t0..t0+n-1.
inline double fit_sinusoid_amplitude(std::span<const double> y, double f, std::size_t t0) {
  std::array<std::array<double, 4>, 3> m{};  // augmented normal equations
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double th = 2.0 * std::numbers::pi * f * static_cast<double>(t0 + i);
    const std::array<double, 3> row{std::sin(th), std::cos(th), 1.0};
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 3; ++c) m[r][c] += row[r] * row[c];
      m[r][3] += row[r] * y[i];
    }
  }
  for (std::size_t col = 0; col < 3; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < 3; ++r) {
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    }
    std::swap(m[col], m[piv]);
    if (m[col][col] == 0.0) throw SingularMatrixError("sinusoid fit is degenerate");
    for (std::size_t r = 0; r < 3; ++r) {
      if (r == col) continue;
      const double k = m[r][col] / m[col][col];
      for (std::size_t c = col; c < 4; ++c) m[r][c] -= k * m[col][c];
    }
  }
  const double a = m[0][3] / m[0][0];
  const double b = m[1][3] / m[1][1];
  return std::hypot(a, b);
}

struct Amplitudes {
  double u = 0.0;
  double g = 0.0;
};

inline Amplitudes drive_and_fit(const DiscreteSystem& sys, double f, const BodeOptions& opt, std::size_t discard,
                                Rng* noise) {
  const auto fit_len = static_cast<std::size_t>(std::ceil(opt.cycles_per_point / f));
  std::vector<double> u_out, g_out;
  u_out.reserve(fit_len);
  g_out.reserve(fit_len);
  GateState x;
  const std::size_t total = discard + fit_len;
  for (std::size_t t = 0; t < total; ++t) {
    double drive = opt.amplitude * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(t));
    if (noise) drive += opt.noise_sd * noise->normal();
    x = step(x, sys, drive);
    if (t >= discard) {
      u_out.push_back(x.u);
      g_out.push_back(sigmoid(x.u));
    }
  }
  return {fit_sinusoid_amplitude(u_out, f, discard), fit_sinusoid_amplitude(g_out, f, discard)};
}

}  // namespace detail

/// Sinusoidal sweep on the latent u. Each point drives u* = A sin(2 pi f t)
/// (+ noise), discards the transient, and fits the output amplitude at the
/// drive frequency. Magnitudes are relative to the lowest frequency in the list.
inline std::vector<BodePoint> bode_sweep(const DiscreteSystem& sys, std::span<const double> frequencies,
                                         const BodeOptions& opt = {}) {
  if (frequencies.empty()) throw EmptyInputError("bode_sweep: no frequencies");
  for (double f : frequencies) {
    if (!std::isfinite(f) || !(f > 0.0)) throw ParameterError("frequency", "must be > 0");
    if (f >= kNyquist) throw ParameterError("frequency", "must be below Nyquist (0.5 cycles/step)");
  }
  if (!std::isfinite(opt.amplitude) || !(opt.amplitude > 0.0)) throw ParameterError("amplitude", "must be > 0");
  if (!(opt.cycles_per_point >= 5.0)) throw ParameterError("cycles_per_point", "must be >= 5");
  if (opt.realizations < 1) throw ParameterError("realizations", "must be >= 1");
  if (!std::isfinite(opt.noise_sd) || opt.noise_sd < 0.0) throw ParameterError("noise_sd", "must be >= 0");

  const double rho = spectral_radius(sys.a_d);
  if (!(rho < 1.0)) throw ParameterError("system", "discrete system is not stable");
  const std::size_t discard =
      rho == 0.0 ? 1 : static_cast<std::size_t>(std::ceil(std::log(opt.transient_tol) / std::log(rho)));

  const bool noisy = opt.noise_sd > 0.0;
  const std::size_t reps = noisy ? opt.realizations : 1;

  struct Raw {
    std::vector<double> u_gain;
    std::vector<double> g_gain;
  };
  std::vector<Raw> raw(frequencies.size());
  for (std::size_t i = 0; i < frequencies.size(); ++i) {
    for (std::size_t r = 0; r < reps; ++r) {
      Rng rng(derive_seed(opt.seed, (static_cast<std::uint64_t>(i) << 32) | r));
      const auto amp = detail::drive_and_fit(sys, frequencies[i], opt, discard, noisy ? &rng : nullptr);
      raw[i].u_gain.push_back(amp.u / opt.amplitude);
      raw[i].g_gain.push_back(amp.g / opt.amplitude);
    }
  }

  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  const auto ref = static_cast<std::size_t>(std::min_element(frequencies.begin(), frequencies.end()) -
                                            frequencies.begin());
  const double u_ref = mean(raw[ref].u_gain);
  const double g_ref = mean(raw[ref].g_gain);

  std::vector<BodePoint> out;
  out.reserve(frequencies.size());
  for (std::size_t i = 0; i < frequencies.size(); ++i) {
    BodePoint p;
    p.frequency = frequencies[i];
    const double gu = mean(raw[i].u_gain);
    p.magnitude_db = i == ref ? 0.0 : 20.0 * std::log10(gu / u_ref);
    p.gain_db = 20.0 * std::log10(gu);
    p.g_magnitude_db = i == ref ? 0.0 : 20.0 * std::log10(mean(raw[i].g_gain) / g_ref);
    if (reps > 1) {
      std::vector<double> db(reps);
      for (std::size_t r = 0; r < reps; ++r) db[r] = 20.0 * std::log10(raw[i].u_gain[r] / u_ref);
      const double mu = mean(db);
      double ss = 0.0;
      for (double d : db) ss += (d - mu) * (d - mu);
      p.sem = std::sqrt(ss / static_cast<double>(reps - 1)) / std::sqrt(static_cast<double>(reps));
    }
    out.push_back(p);
  }
  return out;
}

/// `count` frequencies log-spaced between omega_lo and omega_hi (rad per time
/// unit), converted to cycles per step. Points at or above 0.45 cycles/step
/// are dropped.
inline std::vector<double> log_spaced_frequencies(double omega_lo, double omega_hi, std::size_t count, double dt) {
  if (!(omega_lo > 0.0) || !(omega_hi > omega_lo) || count < 2) {
    throw ParameterError("frequencies", "need 0 < omega_lo < omega_hi and count >= 2");
  }
  std::vector<double> f;
  const double step = std::log(omega_hi / omega_lo) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) {
    const double w = omega_lo * std::exp(step * static_cast<double>(i));
    const double cyc = w * dt / (2.0 * std::numbers::pi);
    if (cyc < 0.45) f.push_back(cyc);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Rank correlation and the confidence-shrinkage analysis
// ---------------------------------------------------------------------------

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  return rank;
}

/// Spearman rank correlation (Pearson on average ranks). Absent when either
/// input is constant.
inline std::optional<double> spearman_rho(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("spearman_rho: length mismatch");
  if (x.size() < 2) throw DimensionError("spearman_rho: need at least two points");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean, dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct E1Input {
  int severity = 0;
  LogitPair pair;
  double g = 0.0;
};

/// sigma(fused top-2 margin) / sigma(max branch top-2 margin), each vector
/// using its own top-2 classes. Defined for every sample, including branch
/// disagreement, but not bounded by 1 there.
inline double csr_unconditioned(const LogitPair& pair, double g) {
  const double ms = top2_margin(pair.z_static).margin;
  const double md = top2_margin(pair.z_dyn).margin;
  const double mf = top2_margin(fuse_logits(pair, g)).margin;
  return sigmoid(mf) / sigmoid(std::max(ms, md));
}

struct E1SeverityRow {
  int severity = 0;
  std::size_t n = 0;
  std::size_t n_valid = 0;
  std::size_t n_agree = 0;
  std::size_t n_disagree = 0;
  std::optional<double> csr_valid;     // mean CSR over samples meeting the margin-contraction preconditions
  std::optional<double> t_eff_valid;   // mean effective temperature over the same samples
  std::optional<double> csr_overall;   // mean unconditioned CSR, all samples
  std::optional<double> csr_agreement;
  std::optional<double> csr_disagreement;
};

struct E1Report {
  std::vector<E1SeverityRow> rows;  // ascending severity
  std::optional<double> spearman_rho;  // severity vs t_eff over valid samples
  double valid_fraction = 0.0;
  std::size_t n_total = 0;
  std::size_t n_valid = 0;
};

inline E1Report e1_analysis(std::span<const E1Input> records) {
  if (records.empty()) throw EmptyInputError("e1_analysis: no records");
  struct Acc {
    std::size_t n = 0, n_valid = 0, n_agree = 0, n_disagree = 0;
    double csr_valid = 0.0, t_eff = 0.0, csr_all = 0.0, csr_agree = 0.0, csr_disagree = 0.0;
  };
  std::map<int, Acc> by_sev;
  std::vector<double> sev_valid, teff_valid;
  for (const auto& r : records) {
    const auto d = margin_diag(r.pair, r.g);
    const double cu = csr_unconditioned(r.pair, r.g);
    const bool agree = branches_agree(r.pair);
    Acc& a = by_sev[r.severity];
    ++a.n;
    a.csr_all += cu;
    if (agree) {
      ++a.n_agree;
      a.csr_agree += cu;
    } else {
      ++a.n_disagree;
      a.csr_disagree += cu;
    }
    if (d.valid) {
      ++a.n_valid;
      a.csr_valid += *d.csr;
      a.t_eff += *d.t_eff;
      sev_valid.push_back(static_cast<double>(r.severity));
      teff_valid.push_back(*d.t_eff);
    }
  }
  if (sev_valid.empty()) throw EmptyInputError("e1_analysis: no sample satisfies the margin-contraction preconditions");

  auto ratio = [](double sum, std::size_t n) -> std::optional<double> {
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  };
  E1Report rep;
  rep.n_total = records.size();
  rep.n_valid = sev_valid.size();
  rep.valid_fraction = static_cast<double>(rep.n_valid) / static_cast<double>(rep.n_total);
  for (const auto& [sev, a] : by_sev) {
    E1SeverityRow row;
    row.severity = sev;
    row.n = a.n;
    row.n_valid = a.n_valid;
    row.n_agree = a.n_agree;
    row.n_disagree = a.n_disagree;
    row.csr_valid = ratio(a.csr_valid, a.n_valid);
    row.t_eff_valid = ratio(a.t_eff, a.n_valid);
    row.csr_overall = ratio(a.csr_all, a.n);
    row.csr_agreement = ratio(a.csr_agree, a.n_agree);
    row.csr_disagreement = ratio(a.csr_disagree, a.n_disagree);
    rep.rows.push_back(row);
  }
  if (sev_valid.size() >= 2) rep.spearman_rho = spearman_rho(sev_valid, teff_valid);
  return rep;
}

}  // namespace knob
