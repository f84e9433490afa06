#pragma once

#include <Eigen/Core>
#include <cmath>
#include <numbers>

namespace bruno {

template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
inline S softplus(S x) {
  return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// inverse of softplus on (0, inf); for large y, exp(y) saturates and the
// inverse is y to within rounding
template <typename S>
inline S softplus_inv(S y) {
  return y > S(30) ? y : S(std::log(std::expm1(double(y))));
}

template <typename S>
inline S sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
inline S logit(S p) {
  return std::log(p) - std::log1p(-p);
}

// log Gamma for strictly positive arguments without touching the signgam
// global, so concurrent evaluation is race-free
inline double lgamma_pos(double x) {
#ifdef __GLIBC__
  int sign;
  return ::lgamma_r(x, &sign);
#else
  return std::lgamma(x);
#endif
}

// psi(x) for x > 0: shift into the asymptotic regime, then the Bernoulli
// series. Accurate to ~1e-14, evaluated in double regardless of S.
template <typename S>
inline S digamma(S x) {
  double xx = static_cast<double>(x);
  double r = 0.0;
  while (xx < 6.0) {
    r -= 1.0 / xx;
    xx += 1.0;
  }
  const double f = 1.0 / (xx * xx);
  r += std::log(xx) - 0.5 / xx -
       f * (1.0 / 12 - f * (1.0 / 120 - f * (1.0 / 252 - f * (1.0 / 240 - f * (1.0 / 132)))));
  return static_cast<S>(r);
}

inline constexpr double kPi = std::numbers::pi;

}  // namespace bruno
