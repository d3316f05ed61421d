#pragma once

#include <array>
#include <cmath>

#include "figconv/tensor.hpp"

namespace figconv {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline Vec3 operator*(double s, const Vec3& a) { return a * s; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline bool is_finite(const Vec3& a) { return std::isfinite(a[0]) && std::isfinite(a[1]) && std::isfinite(a[2]); }

inline Mat3 identity3() { return Mat3{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }
inline Mat3 diag3(double a, double b, double c) { return Mat3{{{a, 0, 0}, {0, b, 0}, {0, 0, c}}}; }

inline Vec3 operator*(const Mat3& m, const Vec3& v) {
  return {dot(m[0], v), dot(m[1], v), dot(m[2], v)};
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
inline Mat3 cholesky3(const Mat3& s) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < i; ++j)
      if (std::abs(s[i][j] - s[j][i]) > 1e-12 * std::max({1.0, std::abs(s[i][j]), std::abs(s[j][i])}))
        throw Error(detail::cat("covariance is not symmetric at (", i, ",", j, ")"));
  Mat3 l{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j <= i; ++j) {
      double acc = s[i][j];
      for (int k = 0; k < j; ++k) acc -= l[i][k] * l[j][k];
      if (i == j) {
        if (!(acc > 0)) throw Error("covariance is not positive definite");
        l[i][i] = std::sqrt(acc);
      } else {
        l[i][j] = acc / l[j][j];
      }
    }
  return l;
}

/// Inverse of a lower-triangular matrix.
inline Mat3 invert_lower3(const Mat3& l) {
  Mat3 inv{};
  for (int i = 0; i < 3; ++i) {
    inv[i][i] = 1.0 / l[i][i];
    for (int j = 0; j < i; ++j) {
      double acc = 0;
      for (int k = j; k < i; ++k) acc += l[i][k] * inv[k][j];
      inv[i][j] = -acc / l[i][i];
    }
  }
  return inv;
}

/// Axis-aligned box.
struct Box {
  Vec3 lo{0, 0, 0};
  Vec3 hi{1, 1, 1};

  Vec3 extent() const { return hi - lo; }
  void validate() const {
    for (int a = 0; a < 3; ++a)
      if (!(hi[a] > lo[a]) || !std::isfinite(lo[a]) || !std::isfinite(hi[a]))
        throw Error(detail::cat("box: axis ", a, " has non-positive or non-finite extent"));
  }
};

}  // namespace figconv
