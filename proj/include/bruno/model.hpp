#pragma once

// The composed model: a coupling-layer flow over D dimensions plus D
// independent exchangeable processes in the latent space. Process parameters
// live in an unconstrained ("raw") form whose decoding guarantees nu > 2,
// v > 0 and 0 <= rho < v under any optimizer step.

#include <Eigen/Core>
#include <cmath>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

#include "bruno/config.hpp"
#include "bruno/data.hpp"
#include "bruno/errors.hpp"
#include "bruno/flow.hpp"
#include "bruno/numeric.hpp"
#include "bruno/process.hpp"
#include "bruno/process_tape.hpp"
#include "bruno/rng.hpp"

namespace bruno {

template <typename S>
struct BrunoModel {
  static constexpr double kVarEps = 1e-6;

  FlowStack<S> flow;
  VecX<S> r_nu, r_v, r_rho;  // unconstrained trainable process parameters
  ProcessMode mode = ProcessMode::StudentT;
  ModelConfig config;  // hyperparameters this model was built with

  int dim() const { return flow.dim; }

  // nu = 2 + softplus(r_nu), v = softplus(r_v) + eps, rho = v sigmoid(r_rho).
  // The floors keep the constraints strict even where softplus/sigmoid
  // saturate to 0 or 1 in floating point; the
  // gradients out there are zero anyway.
  ProcessParams<S> process(long d) const {
    ProcessParams<S> p;
    p.nu = S(2) + std::max(softplus(r_nu[d]), S(1e-5));
    p.mu = S(0);  // fixed, not trainable
    p.v = softplus(r_v[d]) + S(kVarEps);
    p.rho = p.v * std::min(sigmoid(r_rho[d]), S(1) - S(1e-6));
    p.mode = mode;
    return p;
  }
};

template <typename S>
BrunoModel<S> make_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.dim < 1) throw ConstraintViolation("model dim must be >= 1");
  if (cfg.mode == ProcessMode::StudentT && !(cfg.init_nu > 2.0))
    throw ConstraintViolation("init_nu must exceed 2 in StudentT mode");
  if (!(cfg.init_v > 0.0) || !(cfg.init_rho >= 0.0) || !(cfg.init_rho < cfg.init_v))
    throw ConstraintViolation("initial process parameters must satisfy 0 <= rho < v, v > 0");
  BrunoModel<S> m;
  m.mode = cfg.mode;
  m.config = cfg;
  Rng rng(seed);
  m.flow.init(cfg.dim, cfg.depth, cfg.hidden, cfg.weightnorm, cfg.pre, rng);
  m.r_nu = VecX<S>::Constant(cfg.dim, softplus_inv(S(cfg.init_nu) - S(2)));
  m.r_v = VecX<S>::Constant(cfg.dim, softplus_inv(S(cfg.init_v - BrunoModel<S>::kVarEps)));
  // init_rho = 0 maps far enough out that sigmoid underflows to exactly 0:
  // the i.i.d. limit is honest, and (having zero gradient) it is absorbing
  const double ratio = cfg.init_rho / cfg.init_v;
  const double raw_rho = ratio <= 0.0 ? -2000.0 : logit(ratio);
  m.r_rho = VecX<S>::Constant(cfg.dim, S(raw_rho));
  return m;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

template <typename S>
struct ModelGrads {
  FlowGrads<S> flow;
  VecX<S> r_nu, r_v, r_rho;

  void match(const BrunoModel<S>& m) {
    flow.match(m.flow);
    r_nu = VecX<S>::Zero(m.r_nu.size());
    r_v = VecX<S>::Zero(m.r_v.size());
    r_rho = VecX<S>::Zero(m.r_rho.size());
  }
  void setZero() {
    flow.setZero();
    r_nu.setZero();
    r_v.setZero();
    r_rho.setZero();
  }
  void add(const ModelGrads& o) {
    flow.add(o.flow);
    r_nu += o.r_nu;
    r_v += o.r_v;
    r_rho += o.r_rho;
  }
  // convert weightnorm gradients from effective-weight space; call once
  // after all per-example contributions are summed
  void finalize(const BrunoModel<S>& m) { flow.finalize(m.flow); }
};

// Visit every (parameter, gradient) tensor pair in a fixed order.
// fn(S* param, S* grad, long n, bool is_process).
template <typename S, typename F>
void visit_params(BrunoModel<S>& m, ModelGrads<S>& g, F&& fn) {
  auto dense = [&](DenseLayer<S>& l, DenseGrad<S>& dg) {
    fn(l.W.data(), dg.W.data(), long(l.W.size()), false);
    if (l.weightnorm) fn(l.g.data(), dg.g.data(), long(l.g.size()), false);
    fn(l.b.data(), dg.b.data(), long(l.b.size()), false);
  };
  for (std::size_t i = 0; i < m.flow.layers.size(); ++i) {
    auto& L = m.flow.layers[i];
    auto& G = g.flow.layers[i];
    dense(L.fc1, G.fc1);
    dense(L.fc2, G.fc2);
    dense(L.s_head, G.s_head);
    dense(L.t_head, G.t_head);
  }
  fn(m.r_nu.data(), g.r_nu.data(), long(m.r_nu.size()), true);
  fn(m.r_v.data(), g.r_v.data(), long(m.r_v.size()), true);
  fn(m.r_rho.data(), g.r_rho.data(), long(m.r_rho.size()), true);
}

// Parameter-only traversal in the same fixed order as visit_params.
// fn(S* data, long n, bool is_process).
template <typename S, typename F>
void visit_tensors(BrunoModel<S>& m, F&& fn) {
  auto dense = [&](DenseLayer<S>& l) {
    fn(l.W.data(), long(l.W.size()), false);
    if (l.weightnorm) fn(l.g.data(), long(l.g.size()), false);
    fn(l.b.data(), long(l.b.size()), false);
  };
  for (auto& L : m.flow.layers) {
    dense(L.fc1);
    dense(L.fc2);
    dense(L.s_head);
    dense(L.t_head);
  }
  fn(m.r_nu.data(), long(m.r_nu.size()), true);
  fn(m.r_v.data(), long(m.r_v.size()), true);
  fn(m.r_rho.data(), long(m.r_rho.size()), true);
}

// Chain per-dimension gradients w.r.t. the constrained (nu, v, rho) into the
// raw parameterization. rho = v * sigmoid(r_rho) routes part of d_rho into r_v.
template <typename S>
void accumulate_raw_grads(const BrunoModel<S>& m, long d, const ProcessParamGrad<S>& pg,
                          ModelGrads<S>& grads) {
  const S s_rho = sigmoid(m.r_rho[d]);
  const S v = softplus(m.r_v[d]) + S(BrunoModel<S>::kVarEps);
  if (m.mode == ProcessMode::StudentT)
    grads.r_nu[d] += pg.d_nu * sigmoid(m.r_nu[d]);
  grads.r_v[d] += (pg.d_v + pg.d_rho * s_rho) * sigmoid(m.r_v[d]);
  grads.r_rho[d] += pg.d_rho * v * s_rho * (S(1) - s_rho);
}

// ---------------------------------------------------------------------------
// Likelihood
// ---------------------------------------------------------------------------

template <typename S>
struct SequenceLogLik {
  VecX<S> per_step;  // log p(x_{n+1} | x_{1:n}) for n = 0..N-1
  S total;
};

// Single recurrent pass: per step, the flow log-det of that element plus the
// D per-dimension predictive log densities; O(N D) process work.
template <typename S>
SequenceLogLik<S> sequence_log_likelihood(const BrunoModel<S>& m, const MatX<S>& x_seq) {
  const long N = x_seq.cols();
  const long D = x_seq.rows();
  if (D != m.dim()) throw ShapeMismatch("sequence_log_likelihood: wrong dimension");
  std::vector<ProcessParams<S>> params;
  std::vector<PredictiveState<S>> states;
  params.reserve(std::size_t(D));
  states.reserve(std::size_t(D));
  for (long d = 0; d < D; ++d) {
    params.push_back(m.process(d));
    states.push_back(prior_state(params.back()));
  }
  SequenceLogLik<S> out;
  out.per_step.resize(N);
  out.total = S(0);
  for (long k = 0; k < N; ++k) {
    S logdet = S(0);
    const VecX<S> z = m.flow.forward(x_seq.col(k), &logdet);
    S lp = logdet;
    for (long d = 0; d < D; ++d) {
      lp += predictive_log_density(params[std::size_t(d)], states[std::size_t(d)], z[d]);
      states[std::size_t(d)] = update_state(params[std::size_t(d)], states[std::size_t(d)], z[d]);
    }
    out.per_step[k] = lp;
    out.total += lp;
  }
  return out;
}

// Joint log likelihood through the closed-form joint MVT/MVN density per
// latent dimension; small-N verification route for the recurrent pass.
template <typename S>
double joint_log_likelihood_naive(const BrunoModel<S>& m, const MatX<S>& x_seq) {
  const long N = x_seq.cols();
  const long D = x_seq.rows();
  if (D != m.dim()) throw ShapeMismatch("joint_log_likelihood_naive: wrong dimension");
  Eigen::MatrixXd Z(D, N);
  double total = 0;
  for (long k = 0; k < N; ++k) {
    S logdet = S(0);
    const VecX<S> z = m.flow.forward(x_seq.col(k), &logdet);
    Z.col(k) = z.template cast<double>();
    total += double(logdet);
  }
  for (long d = 0; d < D; ++d) {
    const auto ps = m.process(d);
    ProcessParams<double> pd{double(ps.nu), double(ps.mu), double(ps.v), double(ps.rho),
                             ps.mode};
    total += mvt_log_pdf_oracle(pd, Z.row(d).transpose());
  }
  return total;
}

// Backward of loss = -(sum of per-step log likelihoods) / (N*D); accumulates
// into `grads` (flow gradients still in effective-weight space) and returns
// the loss value.
template <typename S>
S sequence_nll_backward(const BrunoModel<S>& m, const MatX<S>& x_seq,
                        ModelGrads<S>& grads) {
  const long N = x_seq.cols();
  const long D = x_seq.rows();
  if (D != m.dim()) throw ShapeMismatch("sequence_nll_backward: wrong dimension");
  const S wstep = S(-1) / S(N * D);

  std::vector<typename FlowStack<S>::Cache> caches(static_cast<std::size_t>(N));
  MatX<S> Z(D, N);
  S total = S(0);
  for (long k = 0; k < N; ++k) {
    S logdet = S(0);
    Z.col(k) = m.flow.forward(x_seq.col(k), &logdet, &caches[std::size_t(k)]);
    total += logdet;
  }

  MatX<S> gZ = MatX<S>::Zero(D, N);
  std::vector<S> zrow(static_cast<std::size_t>(N));
  std::vector<S> gzrow(static_cast<std::size_t>(N));
  std::vector<S> w(static_cast<std::size_t>(N), wstep);
  ProcessTape<S> tape;
  for (long d = 0; d < D; ++d) {
    const auto p = m.process(d);
    for (long k = 0; k < N; ++k) zrow[std::size_t(k)] = Z(d, k);
    std::fill(gzrow.begin(), gzrow.end(), S(0));
    total += process_forward(p, zrow.data(), N, tape);
    const auto pg = process_backward(p, zrow.data(), N, tape, w.data(), gzrow.data());
    accumulate_raw_grads(m, d, pg, grads);
    for (long k = 0; k < N; ++k) gZ(d, k) = gzrow[std::size_t(k)];
  }

  for (long k = 0; k < N; ++k)
    flow_backward(m.flow, caches[std::size_t(k)], grads.flow, VecX<S>(gZ.col(k)), wstep);
  return -total / S(N * D);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// Condition on x_obs (possibly empty), then draw `count` samples from the
// current predictive distribution and map them back through the flow.
template <typename S>
MatX<S> sample_conditional(const BrunoModel<S>& m, const MatX<S>& x_obs, long count,
                           Rng& rng) {
  const long D = m.dim();
  if (x_obs.size() > 0 && x_obs.rows() != D)
    throw ShapeMismatch("sample_conditional: wrong conditioning dimension");
  std::vector<ProcessParams<S>> params;
  std::vector<PredictiveState<S>> states;
  for (long d = 0; d < D; ++d) {
    params.push_back(m.process(d));
    states.push_back(prior_state(params.back()));
  }
  for (long k = 0; k < x_obs.cols(); ++k) {
    const VecX<S> z = m.flow.forward(x_obs.col(k), nullptr);
    for (long d = 0; d < D; ++d)
      states[std::size_t(d)] = update_state(params[std::size_t(d)], states[std::size_t(d)], z[d]);
  }
  MatX<S> out(D, count);
  VecX<S> z(D);
  for (long j = 0; j < count; ++j) {
    for (long d = 0; d < D; ++d)
      z[d] = sample_predictive(params[std::size_t(d)], states[std::size_t(d)], rng);
    out.col(j) = m.flow.inverse(z);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and training loop
// ---------------------------------------------------------------------------

template <typename S>
struct RmsProp {
  S decay, eps;
  std::vector<VecX<S>> acc;

  RmsProp(BrunoModel<S>& m, S decay_, S eps_) : decay(decay_), eps(eps_) {
    ModelGrads<S> g;
    g.match(m);
    visit_params(m, g, [&](S*, S*, long n, bool) { acc.push_back(VecX<S>::Zero(n)); });
  }

  void step(BrunoModel<S>& m, ModelGrads<S>& g, S lr_flow, S lr_proc) {
    std::size_t i = 0;
    visit_params(m, g, [&](S* p, S* gr, long n, bool is_process) {
      VecX<S>& a = acc[i++];
      const S lr = is_process ? lr_proc : lr_flow;
      for (long j = 0; j < n; ++j) {
        a[j] = decay * a[j] + (S(1) - decay) * gr[j] * gr[j];
        p[j] -= lr * gr[j] / (std::sqrt(a[j]) + eps);
      }
    });
  }
};

template <typename S>
struct TrainResult {
  std::vector<double> loss_trace;  // nats per dimension per step
};

namespace detail {

// Assemble one model input from a raw dataset column: dequantize integer
// data (fresh noise per example per iteration), pass reals through.
template <typename S>
MatX<S> preprocess_sequence(const Eigen::MatrixXd& seq, const PreprocessConfig& pre,
                            Rng& rng) {
  if (!pre.dequantize) return seq.cast<S>();
  MatX<S> out(seq.rows(), seq.cols());
  for (long k = 0; k < seq.cols(); ++k)
    out.col(k) = dequantize(seq.col(k), pre, rng).cast<S>();
  return out;
}

}  // namespace detail

// Optional per-iteration batch transform (used by the GP-vs-TP comparison
// harness to inject outlier elements).
using BatchHook = std::function<void(long iter, std::vector<Eigen::MatrixXd>& batch)>;

// Autoregressive maximum-likelihood training. Per-example gradients are
// computed independently (optionally on several threads) and reduced in
// example-index order, so the trace is bitwise reproducible for a given
// seed regardless of thread count.
template <typename S>
TrainResult<S> train(BrunoModel<S>& m, const Dataset& data, const TrainConfig& cfg,
                     const BatchHook& hook = {}) {
  validate(cfg);
  if (data.dim() != m.dim()) throw ShapeMismatch("train: dataset dimension mismatch");
  EpisodeStream stream(data, cfg.seq_len, cfg.batch_size, cfg.seed);
  RmsProp<S> opt(m, S(cfg.rmsprop_decay), S(cfg.rmsprop_eps));
  const long decay_every = cfg.lr_decay ? (cfg.iterations + 2) / 3 : 0;

  const int workers = std::max(1, std::min<int>(cfg.threads, int(cfg.batch_size)));
  std::vector<ModelGrads<S>> bufs(static_cast<std::size_t>(workers));
  for (auto& b : bufs) b.match(m);
  ModelGrads<S> grads;
  grads.match(m);

  TrainResult<S> result;
  result.loss_trace.reserve(std::size_t(cfg.iterations));

  for (long it = 0; it < cfg.iterations; ++it) {
    double lr = cfg.learning_rate;
    if (decay_every > 0)
      lr *= std::pow(0.5, double(it / decay_every));

    auto batch = stream.next();
    if (hook) hook(it, batch);
    grads.setZero();
    std::vector<double> losses(batch.size(), 0.0);

    for (std::size_t start = 0; start < batch.size(); start += std::size_t(workers)) {
      const std::size_t chunk = std::min(std::size_t(workers), batch.size() - start);
      std::vector<std::exception_ptr> errors(chunk);
      auto run_one = [&](std::size_t slot) {
        try {
          const std::size_t idx = start + slot;
          Rng noise = Rng::stream(cfg.seed ^ 0x9e3779b97f4a7c15ull,
                                  std::uint64_t(it) * std::uint64_t(batch.size()) + idx);
          const MatX<S> x = detail::preprocess_sequence<S>(batch[idx], m.config.pre, noise);
          bufs[slot].setZero();
          losses[idx] = double(sequence_nll_backward(m, x, bufs[slot]));
        } catch (...) {
          errors[slot] = std::current_exception();
        }
      };
      if (chunk == 1) {
        run_one(0);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t s = 0; s < chunk; ++s) pool.emplace_back(run_one, s);
        for (auto& t : pool) t.join();
      }
      for (std::size_t s = 0; s < chunk; ++s) {
        if (!errors[s]) continue;
        // non-finite activations mid-run are a divergence, not bad input
        try {
          std::rethrow_exception(errors[s]);
        } catch (const NonFiniteError& e) {
          throw Diverged(std::string("training diverged at iteration ") +
                             std::to_string(it) + ": " + e.what(),
                         result.loss_trace);
        } catch (const DomainError& e) {
          throw Diverged(std::string("training diverged at iteration ") +
                             std::to_string(it) + ": " + e.what(),
                         result.loss_trace);
        }
      }
      for (std::size_t s = 0; s < chunk; ++s) grads.add(bufs[s]);
    }

    double mean_loss = 0;
    for (double l : losses) mean_loss += l;
    mean_loss /= double(losses.size());
    if (!std::isfinite(mean_loss))
      throw Diverged("training loss became non-finite at iteration " + std::to_string(it),
                     result.loss_trace);
    result.loss_trace.push_back(mean_loss);

    grads.finalize(m);
    if (!cfg.train_nu) grads.r_nu.setZero();
    // mean over the batch
    const S inv_b = S(1) / S(batch.size());
    visit_params(m, grads, [&](S*, S* g, long n, bool) {
      for (long j = 0; j < n; ++j) g[j] *= inv_b;
    });
    opt.step(m, grads, S(lr), S(lr * cfg.process_lr_factor));
  }
  return result;
}

}  // namespace bruno
