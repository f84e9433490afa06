#pragma once

// Exchangeable Student-t and Gaussian processes over scalars: prior state,
// O(1)-per-step recurrent predictive updates, predictive densities, polar
// t sampling, and slow closed-form / dense-matrix oracles used for
// verification.

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "bruno/errors.hpp"
#include "bruno/numeric.hpp"
#include "bruno/rng.hpp"

namespace bruno {

enum class ProcessMode { StudentT, Gaussian };

inline const char* to_string(ProcessMode m) {
  return m == ProcessMode::StudentT ? "studentt" : "gaussian";
}

// Per-dimension parameters of the exchangeable process. The covariance is
// v on the diagonal and rho off it; 0 <= rho < v keeps it positive
// definite for every sequence length.
template <typename S>
struct ProcessParams {
  S nu{};   // degrees of freedom, > 2 in StudentT mode
  S mu{};   // prior mean
  S v{};    // prior variance
  S rho{};  // prior covariance
  ProcessMode mode = ProcessMode::StudentT;
};

// Running sufficient statistics after n observations. v_n is the unscaled
// predictive variance; the Student-t scale factor is applied in
// predictive_moments. s_n tracks the running centered sum used by the beta
// recursion.
template <typename S>
struct PredictiveState {
  long n = 0;
  S mu_n{};
  S v_n{};
  S beta_n{};
  S s_n{};
};

template <typename S>
struct PredictiveMoments {
  S dof{};
  S mean{};
  S variance{};
};

template <typename S>
ProcessParams<S> make_params(S nu, S mu, S v, S rho, ProcessMode mode) {
  if (!(v > S(0)))
    throw ConstraintViolation("process variance v must be positive, got " +
                              std::to_string(double(v)));
  if (!(rho >= S(0) && rho < v))
    throw ConstraintViolation("process covariance must satisfy 0 <= rho < v, got rho=" +
                              std::to_string(double(rho)) + " v=" + std::to_string(double(v)));
  if (mode == ProcessMode::StudentT && !(nu > S(2)))
    throw ConstraintViolation("StudentT degrees of freedom must exceed 2, got " +
                              std::to_string(double(nu)));
  return ProcessParams<S>{nu, mu, v, rho, mode};
}

template <typename S>
PredictiveState<S> prior_state(const ProcessParams<S>& p) {
  return PredictiveState<S>{0, p.mu, p.v, S(0), S(0)};
}

namespace detail {

// Entries of the closed-form inverse of the n x n exchangeable covariance:
// a_n on the diagonal, b_n off it (Sherman-Morrison). The v - rho clamp
// only matters if constraint enforcement was bypassed; the canonical
// parameterization keeps v - rho > 0.
template <typename S>
struct InverseEntries {
  S a, b;
};

template <typename S>
InverseEntries<S> inverse_entries(const ProcessParams<S>& p, long n) {
  const S vmr = std::max(p.v - p.rho, S(1e-12));
  const S denom = p.v + p.rho * S(n - 1);
  return {(p.v + p.rho * S(n - 2)) / (vmr * denom), -p.rho / (vmr * denom)};
}

}  // namespace detail

// One recurrent Bayesian update. Coefficients are evaluated at the
// post-increment count: with k observations absorbed, d_k = rho/(v+rho(k-1)).
// The beta recursion pairs each squared running sum with the inverse entry
// of its own matrix size: beta_k = beta_{k-1} + (a_k-b_k) zt^2 + b_k s_k^2
// - b_{k-1} s_{k-1}^2. beta and s are carried in both modes (Gaussian
// moments ignore them).
template <typename S>
PredictiveState<S> update_state(const ProcessParams<S>& p,
                                const PredictiveState<S>& st, S z) {
  if (!std::isfinite(double(z)))
    throw NonFiniteError("update_state: observation is not finite");
  const long k = st.n + 1;
  const S d = p.rho / (p.v + p.rho * S(k - 1));
  const auto [a, b] = detail::inverse_entries(p, k);
  const S b_prev = detail::inverse_entries(p, k - 1).b;
  const S zt = z - p.mu;
  const S s_new = st.s_n + zt;
  PredictiveState<S> out;
  out.n = k;
  out.mu_n = (S(1) - d) * st.mu_n + d * z;
  out.v_n = (S(1) - d) * st.v_n + d * (p.v - p.rho);
  out.beta_n = st.beta_n + (a - b) * zt * zt + b * s_new * s_new - b_prev * st.s_n * st.s_n;
  out.s_n = s_new;
  return out;
}

template <typename S>
PredictiveMoments<S> predictive_moments(const ProcessParams<S>& p,
                                        const PredictiveState<S>& st) {
  PredictiveMoments<S> m;
  m.dof = p.nu + S(st.n);
  m.mean = st.mu_n;
  if (p.mode == ProcessMode::StudentT)
    m.variance = st.v_n * (p.nu + st.beta_n - S(2)) / (p.nu + S(st.n) - S(2));
  else
    m.variance = st.v_n;
  return m;
}

// Variance-parameterized univariate Student-t log density: the (nu-2)
// factor replaces the usual nu so that `variance` is the actual variance
// (for dof > 2), matching the multivariate form below at n = 1. Evaluated
// in double regardless of S: the lgamma difference at large dof loses all
// precision at 32-bit.
template <typename S>
S univariate_t_log_pdf(S dof_, S mean_, S variance_, S z_) {
  const double dof = double(dof_), mean = double(mean_), variance = double(variance_),
               z = double(z_);
  if (!(dof > 2))
    throw DomainError("t log pdf requires dof > 2, got " + std::to_string(dof));
  if (!(variance > 0))
    throw DomainError("t log pdf requires variance > 0, got " + std::to_string(variance));
  const double zc = z - mean;
  const double nm2 = dof - 2;
  const double q = zc * zc / variance;
  return S(lgamma_pos((dof + 1) / 2) - lgamma_pos(dof / 2) -
           0.5 * std::log(nm2 * kPi * variance) - 0.5 * (dof + 1) * std::log1p(q / nm2));
}

template <typename S>
S gaussian_log_pdf(S mean_, S variance_, S z_) {
  const double mean = double(mean_), variance = double(variance_), z = double(z_);
  if (!(variance > 0))
    throw DomainError("gaussian log pdf requires variance > 0");
  const double zc = z - mean;
  return S(-0.5 * std::log(2 * kPi * variance) - zc * zc / (2 * variance));
}

template <typename S>
S predictive_log_density(const ProcessParams<S>& p, const PredictiveState<S>& st,
                         S z) {
  const auto m = predictive_moments(p, st);
  if (p.mode == ProcessMode::StudentT)
    return univariate_t_log_pdf(m.dof, m.mean, m.variance, z);
  return gaussian_log_pdf(m.mean, m.variance, z);
}

// All N per-step predictive log densities of a sequence in one pass.
template <typename S>
std::vector<S> per_step_log_densities(const ProcessParams<S>& p, const S* z,
                                      long n) {
  std::vector<S> out(static_cast<std::size_t>(n));
  PredictiveState<S> st = prior_state(p);
  for (long k = 0; k < n; ++k) {
    out[static_cast<std::size_t>(k)] = predictive_log_density(p, st, z[k]);
    st = update_state(p, st, z[k]);
  }
  return out;
}

// Polar draw from the current predictive distribution. StudentT mode uses
// the rejection-free polar construction: with w = max(a,b)^2 ~ U(0,1) and
// an independent uniform angle 2 pi min/max, the draw is
// cos(angle) * sqrt(nu (w^(-2/nu) - 1)), which is Bailey's
// u sqrt(nu (w^(-2/nu)-1)/w) with the unit-disk coordinate u = sqrt(w) cos
// already normalized into the cosine. The sigma factor sqrt(v (nu-2)/nu)
// converts the standard-t draw so the output variance is exactly the
// predictive variance. expm1 evaluates w^(-2/nu) - 1 without cancellation
// at large nu.
template <typename S>
S sample_predictive(const ProcessParams<S>& p, const PredictiveState<S>& st,
                    Rng& rng) {
  const auto m = predictive_moments(p, st);
  if (p.mode == ProcessMode::Gaussian)
    return m.mean + S(std::sqrt(double(m.variance)) * rng.normal());
  const double dof = double(m.dof);
  double a, b, r;
  do {
    a = rng.uniform();
    b = rng.uniform();
    r = std::max(a, b);
  } while (r == 0.0);
  const double c = std::min(a, b);
  const double angle = 2.0 * kPi * c / r;
  const double t =
      std::cos(angle) * std::sqrt(dof * std::expm1(-4.0 / dof * std::log(r)));
  const double sigma = std::sqrt(double(m.variance) * (dof - 2.0) / dof);
  return S(double(m.mean) + sigma * t);
}

// ---------------------------------------------------------------------------
// Oracles. These are evaluation routes that avoid the recurrences entirely;
// they exist to cross-check the fast path and are kept at double precision.
// ---------------------------------------------------------------------------

// Joint log density of the full vector under the exchangeable MVT (or MVN),
// using the closed-form inverse entries and determinant
// |K| = (v-rho)^(n-1) (v + (n-1) rho).
inline double mvt_log_pdf_oracle(const ProcessParams<double>& p,
                                 const Eigen::VectorXd& z) {
  const long n = z.size();
  if (n < 1) throw DomainError("mvt_log_pdf_oracle: empty observation vector");
  make_params(p.nu, p.mu, p.v, p.rho, p.mode);  // re-validate
  const auto [a, b] = detail::inverse_entries(p, n);
  const Eigen::ArrayXd zt = z.array() - p.mu;
  const double sum_sq = (zt * zt).sum();
  const double sum = zt.sum();
  const double quad = (a - b) * sum_sq + b * sum * sum;
  const double logdet =
      double(n - 1) * std::log(p.v - p.rho) + std::log(p.v + double(n - 1) * p.rho);
  if (p.mode == ProcessMode::Gaussian)
    return -0.5 * double(n) * std::log(2.0 * kPi) - 0.5 * logdet - 0.5 * quad;
  return lgamma_pos((p.nu + double(n)) / 2) - lgamma_pos(p.nu / 2) -
         0.5 * double(n) * std::log((p.nu - 2) * kPi) - 0.5 * logdet -
         0.5 * (p.nu + double(n)) * std::log1p(quad / (p.nu - 2));
}

// Conditional moments through explicit dense matrix arithmetic; no
// recurrences and no closed-form inverse entries. Test oracle only.
struct ConditionalEstimate {
  double dof, mean, variance;  // predictive distribution parameters
  double beta, v_tilde;        // Hotelling statistic and unscaled variance
};

inline ConditionalEstimate conditional_oracle(const ProcessParams<double>& p,
                                              const Eigen::VectorXd& z_obs) {
  const long n = z_obs.size();
  if (n < 1) throw DomainError("conditional_oracle: empty observation vector");
  make_params(p.nu, p.mu, p.v, p.rho, p.mode);
  Eigen::MatrixXd K = Eigen::MatrixXd::Constant(n, n, p.rho);
  K.diagonal().setConstant(p.v);
  const Eigen::MatrixXd Ki = K.inverse();
  const Eigen::VectorXd kb = Eigen::VectorXd::Constant(n, p.rho);
  const Eigen::VectorXd zt = z_obs.array() - p.mu;
  ConditionalEstimate est;
  est.dof = p.nu + double(n);
  est.mean = kb.dot(Ki * zt) + p.mu;
  est.beta = zt.dot(Ki * zt);
  est.v_tilde = p.v - kb.dot(Ki * kb);
  est.variance = p.mode == ProcessMode::StudentT
                     ? est.v_tilde * (p.nu + est.beta - 2) / (p.nu + double(n) - 2)
                     : est.v_tilde;
  return est;
}

}  // namespace bruno
