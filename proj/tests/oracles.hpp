#pragma once

// Reference implementations used only by the tests. Each one is computed a
// different way from the library code it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <utility>
#include <vector>

namespace oracle {

using cplx = std::complex<double>;

/// Roots of s^2 + 2 zeta wn s + wn^2 by the quadratic formula.
inline std::array<cplx, 2> continuous_poles(double zeta, double wn) {
  const cplx disc = std::sqrt(cplx(zeta * zeta - 1.0, 0.0));
  return {wn * (-zeta + disc), wn * (-zeta - disc)};
}

/// Bilinear image z = (1 + s dt/2) / (1 - s dt/2).
inline cplx bilinear(cplx s, double dt) { return (1.0 + s * (dt / 2.0)) / (1.0 - s * (dt / 2.0)); }

/// |H(j w)| written in normalised frequency r = w / wn.
inline double second_order_gain(double zeta, double wn, double w) {
  const double r = w / wn;
  return 1.0 / std::sqrt((1.0 - r * r) * (1.0 - r * r) + (2.0 * zeta * r) * (2.0 * zeta * r));
}

inline double percent_overshoot(double zeta) { return std::exp(-std::numbers::pi * zeta / std::sqrt(1.0 - zeta * zeta)); }

/// AUC by counting every (positive, negative) pair; ties count one half.
inline double auc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      if (s[i] > s[j]) wins += 1.0;
      if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

/// Rank of each element by counting smaller and equal elements.
inline std::vector<double> count_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0.0, equal = 0.0;
    for (double v : x) {
      if (v < x[i]) less += 1.0;
      if (v == x[i]) equal += 1.0;
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

/// Five-point central difference.
inline double derivative(const std::function<double(double)>& f, double x, double h) {
  return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h);
}

inline double logistic(double x) { return 0.5 * (1.0 + std::tanh(0.5 * x)); }

/// Cross-entropy of fused logits computed without max subtraction.
inline double fused_ce(const std::vector<double>& zs, const std::vector<double>& zd, std::size_t y, double g) {
  double denom = 0.0;
  for (std::size_t k = 0; k < zs.size(); ++k) denom += std::exp(g * zd[k] + (1 - g) * zs[k]);
  return std::log(denom) - (g * zd[y] + (1 - g) * zs[y]);
}

struct CalibratedSample {
  std::vector<double> probs;
  std::size_t label;
};

/// Perfectly calibrated K-class predictions: confidence c ~ U(1/K + eps, 1),
/// the top class is correct with probability exactly c, and the remaining
/// mass is spread evenly.
inline std::vector<CalibratedSample> calibrated_predictions(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> conf(1.0 / static_cast<double>(k) + 1e-3, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> cls(0, k - 1);
  std::vector<CalibratedSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = conf(gen);
    const std::size_t top = cls(gen);
    std::vector<double> p(k, (1.0 - c) / static_cast<double>(k - 1));
    p[top] = c;
    std::size_t label = top;
    if (coin(gen) >= c) {
      do label = cls(gen);
      while (label == top);
    }
    out.push_back({std::move(p), label});
  }
  return out;
}

/// Log-uniform draw over [lo, hi].
inline double log_uniform(std::mt19937_64& gen, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(gen));
}

}  // namespace oracle
