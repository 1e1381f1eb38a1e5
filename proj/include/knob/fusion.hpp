#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "knob/dynamics.hpp"
#include "knob/errors.hpp"

namespace knob {

/// Per-sample logits of the static and dynamic branches.
struct LogitPair {
  std::vector<double> z_static;
  std::vector<double> z_dyn;

  std::size_t classes() const noexcept { return z_static.size(); }

  void validate() const {
    if (z_static.size() != z_dyn.size()) {
      throw DimensionError("branch logits differ in length (" + std::to_string(z_static.size()) +
                           " vs " + std::to_string(z_dyn.size()) + ")");
    }
    if (z_static.size() < 2) throw DimensionError("need at least two classes");
    auto finite = [](double x) { return std::isfinite(x); };
    if (!std::all_of(z_static.begin(), z_static.end(), finite) ||
        !std::all_of(z_dyn.begin(), z_dyn.end(), finite)) {
      throw ParameterError("logits", "must be finite");
    }
  }
};

struct FusedOutput {
  std::vector<double> z_fuse;
  double g = 0.0;
  std::vector<double> probs;
  double p_max = 0.0;
};

struct Top2 {
  std::size_t k_star = 0;
  std::size_t j_star = 1;
  double margin = 0.0;
};

/// Top-2 margin diagnostics of a fused pair.
///
/// m_static / m_dyn are the branch margins at the shared (k*, j*). The fused
/// margin follows the fusion rule: m_fuse = g m_dyn + (1 - g) m_static.
/// t_eff and csr are present only when `valid`.
struct MarginDiag {
  std::size_t k_star = 0;
  std::size_t j_star = 1;
  double m_static = 0.0;
  double m_dyn = 0.0;
  double m_fuse = 0.0;
  std::optional<double> t_eff;
  std::optional<double> csr;
  bool valid = false;
};

inline void check_gate(double g) {
  if (!std::isfinite(g) || g < 0.0 || g > 1.0) throw ParameterError("g", "gate must lie in [0, 1]");
}

/// Index of the largest entry, lowest index on ties.
inline std::size_t argmax(std::span<const double> z) {
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

inline std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> p(z.size());
  if (z.empty()) return p;
  const double top = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    p[k] = std::exp(z[k] - top);
    total += p[k];
  }
  for (double& x : p) x /= total;
  return p;
}

inline double log_sum_exp(std::span<const double> z) {
  const double top = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double x : z) total += std::exp(x - top);
  return top + std::log(total);
}

/// z_fuse = g z_dyn + (1 - g) z_static. The endpoints return the branch
/// logits unchanged.
inline std::vector<double> fuse_logits(const LogitPair& pair, double g) {
  if (g == 0.0) return pair.z_static;
  if (g == 1.0) return pair.z_dyn;
  std::vector<double> z(pair.classes());
  for (std::size_t k = 0; k < z.size(); ++k) z[k] = g * pair.z_dyn[k] + (1.0 - g) * pair.z_static[k];
  return z;
}

inline FusedOutput fuse(const LogitPair& pair, double g) {
  pair.validate();
  check_gate(g);
  FusedOutput out;
  out.g = g;
  out.z_fuse = fuse_logits(pair, g);
  out.probs = softmax(out.z_fuse);
  out.p_max = *std::max_element(out.probs.begin(), out.probs.end());
  return out;
}

inline Top2 top2_margin(std::span<const double> z) {
  if (z.size() < 2) throw DimensionError("top-2 margin needs at least two classes");
  Top2 t;
  t.k_star = argmax(z);
  bool have_runner = false;
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (k == t.k_star) continue;
    if (!have_runner || z[k] > z[t.j_star]) {
      t.j_star = k;
      have_runner = true;
    }
  }
  t.margin = z[t.k_star] - z[t.j_star];
  return t;
}

inline MarginDiag margin_diag(const LogitPair& pair, double g) {
  pair.validate();
  check_gate(g);
  const Top2 ts = top2_margin(pair.z_static);
  const Top2 td = top2_margin(pair.z_dyn);

  MarginDiag d;
  d.k_star = ts.k_star;
  d.j_star = ts.j_star;
  d.m_static = ts.margin;
  d.m_dyn = td.margin;
  d.m_fuse = g * d.m_dyn + (1.0 - g) * d.m_static;

  if (ts.k_star != td.k_star || ts.j_star != td.j_star) return d;
  const auto fused = fuse_logits(pair, g);
  const Top2 tf = top2_margin(fused);
  if (tf.k_star != ts.k_star || tf.j_star != ts.j_star) return d;

  d.valid = true;
  const double lo = std::min(d.m_static, d.m_dyn);
  const double hi = std::max(d.m_static, d.m_dyn);
  // The convex combination lies in [lo, hi]; clamp away rounding.
  d.m_fuse = std::clamp(d.m_fuse, lo, hi);
  if (d.m_fuse > 0.0) {
    d.t_eff = hi / d.m_fuse;
    d.csr = sigmoid(d.m_fuse) / sigmoid(hi);
  } else {
    d.t_eff = 1.0;
    d.csr = 1.0;
  }
  return d;
}

/// l(g) = -z_y(g) + log sum_k exp z_k(g), with z(g) the fused logits.
inline double cross_entropy_in_g(const LogitPair& pair, std::size_t label, double g) {
  pair.validate();
  if (label >= pair.classes()) throw ParameterError("label", "out of range");
  const auto z = fuse_logits(pair, g);
  return log_sum_exp(z) - z[label];
}

/// dl/dg = sum_k p_k (z_dyn - z_static)_k - (z_dyn - z_static)_y.
inline double d_cross_entropy_dg(const LogitPair& pair, std::size_t label, double g) {
  pair.validate();
  if (label >= pair.classes()) throw ParameterError("label", "out of range");
  const auto p = softmax(fuse_logits(pair, g));
  double expected = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) expected += p[k] * (pair.z_dyn[k] - pair.z_static[k]);
  return expected - (pair.z_dyn[label] - pair.z_static[label]);
}

inline bool branches_agree(const LogitPair& pair) {
  return argmax(pair.z_static) == argmax(pair.z_dyn);
}

struct DisagreementSplit {
  std::vector<std::size_t> agreement;
  std::vector<std::size_t> disagreement;
};

/// Partitions indices by whether the branch top-1 classes coincide.
inline DisagreementSplit disagreement_split(std::span<const LogitPair> pairs) {
  DisagreementSplit split;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    (branches_agree(pairs[i]) ? split.agreement : split.disagreement).push_back(i);
  }
  return split;
}

}  // namespace knob
