#include "bruno/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace bruno {

namespace {

double rel_err(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max(std::abs(b), floor);
}

}  // namespace

ProcessParams<double> random_process_params(Rng& rng, ProcessMode mode) {
  const double v = 0.5 + 2.0 * rng.uniform();
  const double rho = v * 0.95 * rng.uniform();
  const double nu = 2.5 + 50.0 * rng.uniform();
  const double mu = -1.0 + 2.0 * rng.uniform();
  return make_params(nu, mu, v, rho, mode);
}

Eigen::VectorXd sample_matched_sequence(const ProcessParams<double>& p, long n, Rng& rng) {
  const double theta = p.mu + std::sqrt(p.rho) * rng.normal();
  Eigen::VectorXd z(n);
  for (long i = 0; i < n; ++i) z[i] = theta + std::sqrt(p.v - p.rho) * rng.normal();
  return z;
}

double oracle_equivalence_max_rel_error(long cases, long max_n, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0;
  for (long c = 0; c < cases; ++c) {
    const auto mode = c % 4 == 3 ? ProcessMode::Gaussian : ProcessMode::StudentT;
    const auto p = random_process_params(rng, mode);
    const long n = 1 + long(rng.below(std::uint64_t(max_n)));
    const Eigen::VectorXd z = sample_matched_sequence(p, n, rng);
    auto st = prior_state(p);
    for (long i = 0; i < n; ++i) st = update_state(p, st, z[i]);
    const auto m = predictive_moments(p, st);
    const auto est = conditional_oracle(p, z);
    worst = std::max(worst, rel_err(double(m.dof), est.dof));
    worst = std::max(worst, rel_err(double(m.mean), est.mean));
    worst = std::max(worst, rel_err(double(m.variance), est.variance));
    if (mode == ProcessMode::StudentT)
      worst = std::max(worst, rel_err(double(st.beta_n), est.beta));
  }
  return worst;
}

TelescopingErrors telescoping_max_errors(long cases, long max_n, std::uint64_t seed) {
  Rng rng(seed);
  TelescopingErrors errs;
  for (long c = 0; c < cases; ++c) {
    const auto mode = c % 4 == 3 ? ProcessMode::Gaussian : ProcessMode::StudentT;
    const auto p = random_process_params(rng, mode);
    const long n = 2 + long(rng.below(std::uint64_t(max_n - 1)));
    Eigen::VectorXd z = sample_matched_sequence(p, n, rng);
    const auto steps = per_step_log_densities(p, z.data(), n);
    double total = 0;
    for (double s : steps) total += s;
    const double joint = mvt_log_pdf_oracle(p, z);
    errs.telescoping = std::max(errs.telescoping, std::abs(total - joint));
    // a random permutation of the same observations
    Eigen::VectorXd zp = z;
    for (long i = 0; i < n; ++i) {
      const long j = i + long(rng.below(std::uint64_t(n - i)));
      std::swap(zp[i], zp[j]);
    }
    errs.permutation = std::max(errs.permutation, std::abs(joint - mvt_log_pdf_oracle(p, zp)));
  }
  return errs;
}

double sequence_nll(BrunoModel<double>& m, const MatX<double>& x_seq) {
  const auto ll = sequence_log_likelihood(m, x_seq);
  return -ll.total / double(x_seq.rows() * x_seq.cols());
}

namespace {

// generic central-difference sweep over every parameter
template <typename LossFn, typename GradFn>
double gradient_sweep(BrunoModel<double>& m, LossFn&& loss, GradFn&& backward, double h) {
  ModelGrads<double> grads;
  grads.match(m);
  grads.setZero();
  backward(grads);
  grads.finalize(m);

  double worst = 0;
  ModelGrads<double>& g = grads;
  std::vector<std::pair<double*, long>> tensors;
  std::vector<double*> gptr;
  visit_params(m, g, [&](double* p, double* gr, long n, bool) {
    tensors.emplace_back(p, n);
    gptr.push_back(gr);
  });
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    auto [p, n] = tensors[t];
    for (long j = 0; j < n; ++j) {
      const double orig = p[j];
      p[j] = orig + h;
      const double lp = loss();
      p[j] = orig - h;
      const double lm = loss();
      p[j] = orig;
      const double fd = (lp - lm) / (2 * h);
      const double an = gptr[t][j];
      worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4}));
    }
  }
  return worst;
}

}  // namespace

double model_gradient_max_rel_error(BrunoModel<double>& m, const MatX<double>& x_seq,
                                    double h) {
  return gradient_sweep(
      m, [&] { return sequence_nll(m, x_seq); },
      [&](ModelGrads<double>& g) { sequence_nll_backward(m, x_seq, g); }, h);
}

double episode_gradient_max_rel_error(BrunoModel<double>& m, const Episode<double>& ep,
                                      double h) {
  auto loss_only = [&] {
    const VecX<double> scores = class_log_scores_fast(m, ep);
    // latent-space logits: subtract the shared query log-det
    double logdet = 0;
    m.flow.forward(ep.query, &logdet);
    VecX<double> logits = scores.array() - logdet;
    const double lmax = logits.maxCoeff();
    return -(logits[ep.target] - lmax - std::log((logits.array() - lmax).exp().sum()));
  };
  return gradient_sweep(
      m, loss_only, [&](ModelGrads<double>& g) { episode_nll_backward(m, ep, g); }, h);
}

std::vector<CheckResult> run_selftest() {
  std::vector<CheckResult> results;
  char buf[160];

  {
    const double err = oracle_equivalence_max_rel_error(200, 64, 41);
    std::snprintf(buf, sizeof buf, "max relative error %.3g (tolerance 1e-9)", err);
    results.push_back({"recurrence vs explicit-inversion oracle", err < 1e-9, buf});
  }
  {
    const auto errs = telescoping_max_errors(100, 16, 42);
    std::snprintf(buf, sizeof buf, "telescoping %.3g (tol 1e-8), permutation %.3g (tol 1e-10)",
                  errs.telescoping, errs.permutation);
    results.push_back({"telescoping and permutation invariance",
                       errs.telescoping < 1e-8 && errs.permutation < 1e-10, buf});
  }
  {
    ModelConfig cfg;
    cfg.dim = 16;
    cfg.depth = 4;
    cfg.hidden = 24;
    cfg.pre.logit = true;
    cfg.pre.dequantize = false;
    auto m = make_model<double>(cfg, 7);
    Rng rng(8);
    // perturb the heads so the flow is not the identity
    ModelGrads<double> g;
    g.match(m);
    visit_params(m, g, [&](double* p, double*, long n, bool is_process) {
      if (is_process) return;
      for (long j = 0; j < n; ++j) p[j] += 0.05 * rng.normal();
    });
    double worst = 0;
    for (int t = 0; t < 20; ++t) {
      VecX<double> x(cfg.dim);
      for (int d = 0; d < cfg.dim; ++d) x[d] = rng.uniform();
      double logdet = 0;
      const VecX<double> z = m.flow.forward(x, &logdet);
      worst = std::max(worst, (m.flow.inverse(z) - x).template lpNorm<Eigen::Infinity>());
    }
    std::snprintf(buf, sizeof buf, "max round-trip error %.3g (tolerance 1e-6)", worst);
    results.push_back({"flow bijectivity", worst < 1e-6, buf});
  }
  {
    ModelConfig cfg;
    cfg.dim = 8;
    cfg.depth = 2;
    cfg.hidden = 16;
    cfg.pre.logit = false;
    cfg.pre.dequantize = false;
    auto m = make_model<double>(cfg, 11);
    Rng rng(12);
    ModelGrads<double> g;
    g.match(m);
    visit_params(m, g, [&](double* p, double*, long n, bool is_process) {
      if (is_process) return;
      for (long j = 0; j < n; ++j) p[j] += 0.1 * rng.normal();
    });
    MatX<double> x(cfg.dim, 6);
    for (long i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    const double err = model_gradient_max_rel_error(m, x);
    std::snprintf(buf, sizeof buf, "max relative error %.3g (tolerance 1e-3)", err);
    results.push_back({"gradients vs central finite differences", err < 1e-3, buf});
  }
  return results;
}

}  // namespace bruno
