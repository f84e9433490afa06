#pragma once

// Reverse-mode differentiation through the predictive recurrences of one
// latent dimension. The forward pass records every intermediate state; the
// backward pass walks the updates in reverse, accumulating adjoints for the
// observations and for the constrained process parameters (nu, v, rho).

#include <cmath>
#include <vector>

#include "bruno/numeric.hpp"
#include "bruno/process.hpp"

namespace bruno {

template <typename S>
struct PdfGrad {
  S logp, d_dof, d_mean, d_var, d_z;
};

template <typename S>
PdfGrad<S> t_log_pdf_grad(S dof_, S mean_, S var_, S z_) {
  const double dof = double(dof_), mean = double(mean_), var = double(var_),
               z = double(z_);
  const double zc = z - mean;
  const double nm2 = dof - 2;
  const double q = zc * zc / var;
  const double l1p = std::log1p(q / nm2);
  PdfGrad<S> g;
  g.logp = S(lgamma_pos((dof + 1) / 2) - lgamma_pos(dof / 2) -
             0.5 * std::log(nm2 * kPi * var) - 0.5 * (dof + 1) * l1p);
  const double denom = nm2 * var + zc * zc;
  g.d_z = S(-(dof + 1) * zc / denom);
  g.d_mean = S((dof + 1) * zc / denom);
  g.d_var = S(-0.5 / var + 0.5 * (dof + 1) * zc * zc / (var * denom));
  g.d_dof = S(0.5 * digamma((dof + 1) / 2) - 0.5 * digamma(dof / 2) - 0.5 / nm2 -
              0.5 * l1p + 0.5 * (dof + 1) * q / (nm2 * (nm2 + q)));
  return g;
}

template <typename S>
PdfGrad<S> gaussian_log_pdf_grad(S mean, S var, S z) {
  const S zc = z - mean;
  PdfGrad<S> g;
  g.logp = S(-0.5) * std::log(S(2) * S(kPi) * var) - zc * zc / (S(2) * var);
  g.d_dof = S(0);
  g.d_z = -zc / var;
  g.d_mean = zc / var;
  g.d_var = S(-0.5) / var + zc * zc / (S(2) * var * var);
  return g;
}

// States after k = 0..N observations plus the per-step predictive log
// densities: logp[k] is the density of z[k] under the state with k
// observations absorbed.
template <typename S>
struct ProcessTape {
  std::vector<S> mu, vt, beta, s;
  std::vector<S> logp;

  void resize(long n) {
    mu.resize(n + 1);
    vt.resize(n + 1);
    beta.resize(n + 1);
    s.resize(n + 1);
    logp.resize(n);
  }
};

template <typename S>
struct ProcessParamGrad {
  S d_nu = S(0), d_v = S(0), d_rho = S(0);
};

// Forward pass; returns the summed log density.
template <typename S>
S process_forward(const ProcessParams<S>& p, const S* z, long n,
                  ProcessTape<S>& tape) {
  tape.resize(n);
  PredictiveState<S> st = prior_state(p);
  S total = S(0);
  for (long k = 0; k <= n; ++k) {
    tape.mu[k] = st.mu_n;
    tape.vt[k] = st.v_n;
    tape.beta[k] = st.beta_n;
    tape.s[k] = st.s_n;
    if (k == n) break;
    tape.logp[k] = predictive_log_density(p, st, z[k]);
    total += tape.logp[k];
    st = update_state(p, st, z[k]);
  }
  return total;
}

// Backward pass. w[k] is dL/d logp[k]; observation adjoints are added into
// gz[k]. Returns dL/d(nu, v, rho) in the constrained parameterization.
template <typename S>
ProcessParamGrad<S> process_backward(const ProcessParams<S>& p, const S* z,
                                     long n, const ProcessTape<S>& tape,
                                     const S* w, S* gz) {
  ProcessParamGrad<S> pg;
  const bool student = p.mode == ProcessMode::StudentT;
  // adjoints of the state with k+1 observations, walking k = n-1 .. 0
  S gmu = S(0), gvt = S(0), gbeta = S(0), gs = S(0);
  for (long k = n - 1; k >= 0; --k) {
    const long c = k + 1;  // post-increment count of the update being reversed
    const S denom = p.v + p.rho * S(c - 1);
    const S d = p.rho / denom;

    // mu_{k+1} = (1-d) mu_k + d z[k]
    S g_d = gmu * (z[k] - tape.mu[k]);
    gz[k] += gmu * d;
    gmu = gmu * (S(1) - d);

    // vt_{k+1} = (1-d) vt_k + d (v - rho)
    g_d += gvt * (p.v - p.rho - tape.vt[k]);
    pg.d_v += gvt * d;
    pg.d_rho -= gvt * d;
    gvt = gvt * (S(1) - d);

    // d = rho / (v + rho (c-1))
    pg.d_rho += g_d * p.v / (denom * denom);
    pg.d_v -= g_d * p.rho / (denom * denom);

    if (student) {
      // beta_{k+1} = beta_k + (a_c - b_c) zt^2 + b_c s_{k+1}^2
      //              - b_{c-1} s_k^2, with s_{k+1} = s_k + zt
      const S vmr = p.v - p.rho;
      const S B = vmr * denom;
      const S A = p.v + p.rho * S(c - 2);
      const S a = A / B;
      const S b = -p.rho / B;
      const S Bp = vmr * (p.v + p.rho * S(c - 2));
      const S b_prev = -p.rho / Bp;
      const S zt = z[k] - p.mu;
      const S s_new = tape.s[c];
      const S s_old = tape.s[k];

      S g_zt = gbeta * S(2) * (a - b) * zt;
      const S g_a = gbeta * zt * zt;
      const S g_b = gbeta * (s_new * s_new - zt * zt);
      const S g_bprev = -gbeta * s_old * s_old;
      const S g_snew = gs + gbeta * S(2) * b * s_new;
      gs = g_snew - gbeta * S(2) * b_prev * s_old;
      g_zt += g_snew;
      gz[k] += g_zt;  // zt = z - mu with mu fixed

      const S dB_dv = S(2) * p.v + p.rho * S(c - 2);
      const S dB_drho = S(c - 2) * p.v - S(2) * S(c - 1) * p.rho;
      pg.d_v += g_a * (B - A * dB_dv) / (B * B);
      pg.d_rho += g_a * (S(c - 2) * B - A * dB_drho) / (B * B);
      pg.d_v += g_b * p.rho * dB_dv / (B * B);
      pg.d_rho += g_b * (-B + p.rho * dB_drho) / (B * B);
      const S dBp_dv = S(2) * p.v + p.rho * S(c - 3);
      const S dBp_drho = S(c - 3) * p.v - S(2) * S(c - 2) * p.rho;
      pg.d_v += g_bprev * p.rho * dBp_dv / (Bp * Bp);
      pg.d_rho += g_bprev * (-Bp + p.rho * dBp_drho) / (Bp * Bp);
    }

    // density evaluation of z[k] against the state with k observations
    const S dofk = p.nu + S(k);
    PdfGrad<S> dg;
    if (student) {
      const S scale = (p.nu + tape.beta[k] - S(2)) / (dofk - S(2));
      const S var = tape.vt[k] * scale;
      dg = t_log_pdf_grad(dofk, tape.mu[k], var, z[k]);
      gmu += w[k] * dg.d_mean;
      gvt += w[k] * dg.d_var * scale;
      gbeta += w[k] * dg.d_var * tape.vt[k] / (dofk - S(2));
      pg.d_nu += w[k] * (dg.d_dof + dg.d_var * tape.vt[k] * (S(k) - tape.beta[k]) /
                                        ((dofk - S(2)) * (dofk - S(2))));
    } else {
      dg = gaussian_log_pdf_grad(tape.mu[k], tape.vt[k], z[k]);
      gmu += w[k] * dg.d_mean;
      gvt += w[k] * dg.d_var;
    }
    gz[k] += w[k] * dg.d_z;
  }
  // prior state: mu_0 = mu (fixed), vt_0 = v, beta_0 = s_0 = 0
  pg.d_v += gvt;
  return pg;
}

}  // namespace bruno
