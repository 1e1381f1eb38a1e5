#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>

#include "knob/errors.hpp"

namespace knob {

/// Column vector of length 2.
struct Vec2 {
  std::array<double, 2> v{0.0, 0.0};

  constexpr double& operator[](std::size_t i) { return v[i]; }
  constexpr double operator[](std::size_t i) const { return v[i]; }

  friend constexpr bool operator==(const Vec2&, const Vec2&) = default;
};

/// Row-major 2x2 matrix. Everything here is closed form; no general solver.
struct Mat2 {
  std::array<double, 4> m{0.0, 0.0, 0.0, 0.0};

  static constexpr Mat2 identity() { return Mat2{{1.0, 0.0, 0.0, 1.0}}; }

  constexpr double& operator()(std::size_t r, std::size_t c) { return m[2 * r + c]; }
  constexpr double operator()(std::size_t r, std::size_t c) const { return m[2 * r + c]; }

  constexpr double trace() const { return m[0] + m[3]; }
  constexpr double det() const { return m[0] * m[3] - m[1] * m[2]; }

  friend constexpr bool operator==(const Mat2&, const Mat2&) = default;
};

constexpr Mat2 operator+(const Mat2& a, const Mat2& b) {
  return Mat2{{a.m[0] + b.m[0], a.m[1] + b.m[1], a.m[2] + b.m[2], a.m[3] + b.m[3]}};
}

constexpr Mat2 operator-(const Mat2& a, const Mat2& b) {
  return Mat2{{a.m[0] - b.m[0], a.m[1] - b.m[1], a.m[2] - b.m[2], a.m[3] - b.m[3]}};
}

constexpr Mat2 operator*(double s, const Mat2& a) {
  return Mat2{{s * a.m[0], s * a.m[1], s * a.m[2], s * a.m[3]}};
}

constexpr Mat2 operator*(const Mat2& a, const Mat2& b) {
  return Mat2{{a(0, 0) * b(0, 0) + a(0, 1) * b(1, 0), a(0, 0) * b(0, 1) + a(0, 1) * b(1, 1),
               a(1, 0) * b(0, 0) + a(1, 1) * b(1, 0), a(1, 0) * b(0, 1) + a(1, 1) * b(1, 1)}};
}

constexpr Vec2 operator*(const Mat2& a, const Vec2& x) {
  return Vec2{{a(0, 0) * x[0] + a(0, 1) * x[1], a(1, 0) * x[0] + a(1, 1) * x[1]}};
}

constexpr Vec2 operator*(double s, const Vec2& x) { return Vec2{{s * x[0], s * x[1]}}; }

inline bool all_finite(const Mat2& a) {
  return std::all_of(a.m.begin(), a.m.end(), [](double x) { return std::isfinite(x); });
}

inline bool all_finite(const Vec2& x) { return std::isfinite(x[0]) && std::isfinite(x[1]); }

/// Explicit adjugate inverse. Throws SingularMatrixError when the determinant
/// is zero, non-finite, or negligible against the entry scale.
inline Mat2 inverse(const Mat2& a) {
  const double d = a.det();
  const double scale = std::max({std::abs(a.m[0] * a.m[3]), std::abs(a.m[1] * a.m[2]),
                                 std::numeric_limits<double>::min()});
  if (!std::isfinite(d) || std::abs(d) <= 8.0 * std::numeric_limits<double>::epsilon() * scale) {
    throw SingularMatrixError("2x2 matrix is numerically singular (det = " + std::to_string(d) + ")");
  }
  return Mat2{{a.m[3] / d, -a.m[1] / d, -a.m[2] / d, a.m[0] / d}};
}

/// Both eigenvalues of a real 2x2 matrix via trace and determinant.
///
/// The half-discriminant is formed as ((a00 - a11)/2)^2 + a01*a10, which avoids
/// cancelling tr^2 against 4*det. A value smaller than its own rounding bound is
/// treated as zero, so an exactly repeated root comes back repeated. For a real
/// pair the larger-magnitude root is taken first and the other recovered from
/// det / lambda to avoid cancellation.
inline std::array<std::complex<double>, 2> eigenvalues(const Mat2& a) {
  if (!all_finite(a)) throw ParameterError("matrix", "eigenvalues of a non-finite matrix");
  const double half_tr = 0.5 * a.trace();
  const double half_diff = 0.5 * (a(0, 0) - a(1, 1));
  const double cross = a(0, 1) * a(1, 0);
  double disc = half_diff * half_diff + cross;
  const double noise =
      8.0 * std::numeric_limits<double>::epsilon() * (half_diff * half_diff + std::abs(cross));
  if (std::abs(disc) <= noise) disc = 0.0;

  if (disc >= 0.0) {
    if (disc == 0.0) return {std::complex<double>(half_tr, 0.0), std::complex<double>(half_tr, 0.0)};
    const double root = std::sqrt(disc);
    const double big = half_tr >= 0.0 ? half_tr + root : half_tr - root;
    const double small = a.det() / big;
    return {std::complex<double>(big, 0.0), std::complex<double>(small, 0.0)};
  }
  const double imag = std::sqrt(-disc);
  return {std::complex<double>(half_tr, imag), std::complex<double>(half_tr, -imag)};
}

/// max |lambda_i|. For a complex-conjugate pair this is sqrt(det).
inline double spectral_radius(const Mat2& a) {
  const auto ev = eigenvalues(a);
  if (ev[0].imag() != 0.0) return std::sqrt(a.det());
  return std::max(std::abs(ev[0].real()), std::abs(ev[1].real()));
}

}  // namespace knob
