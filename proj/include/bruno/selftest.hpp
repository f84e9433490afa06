#pragma once

// Verification routines shared by the `selftest` CLI command, the unit
// tests and the acceptance suite: recurrence-vs-oracle equivalence and
// finite-difference gradient checks.

#include <string>
#include <vector>

#include "bruno/model.hpp"
#include "bruno/process.hpp"
#include "bruno/tasks.hpp"

namespace bruno {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Random well-conditioned process parameters: v in [0.5, 2.5],
// rho/v in [0, 0.95], nu in (2.5, 52.5], mu in [-1, 1].
ProcessParams<double> random_process_params(Rng& rng, ProcessMode mode);

// A sequence from the matched exchangeable Gaussian: theta ~ N(mu, rho),
// z_i ~ N(theta, v - rho).
Eigen::VectorXd sample_matched_sequence(const ProcessParams<double>& p, long n, Rng& rng);

// Largest relative error of recurrent (dof, mean, variance, beta) against
// conditional_oracle over `cases` random parameter/sequence draws.
double oracle_equivalence_max_rel_error(long cases, long max_n, std::uint64_t seed);

// Largest |sum of per-step predictive log densities - joint oracle| and the
// largest permutation deviation of the joint, over `cases` random draws.
struct TelescopingErrors {
  double telescoping = 0;
  double permutation = 0;
};
TelescopingErrors telescoping_max_errors(long cases, long max_n, std::uint64_t seed);

// Forward-only sequence loss (matches sequence_nll_backward's value).
double sequence_nll(BrunoModel<double>& m, const MatX<double>& x_seq);

// Max relative error of every parameter gradient of the sequence loss
// against central finite differences with step h.
double model_gradient_max_rel_error(BrunoModel<double>& m, const MatX<double>& x_seq,
                                    double h = 1e-4);

// Same for the episode cross-entropy loss.
double episode_gradient_max_rel_error(BrunoModel<double>& m, const Episode<double>& ep,
                                      double h = 1e-4);

// The suites behind `bruno selftest`.
std::vector<CheckResult> run_selftest();

}  // namespace bruno
