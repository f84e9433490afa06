#pragma once

// Few-shot classification, discriminative fine-tuning, online anomaly
// scoring and latent-parameter analysis, all built on the model's
// conditional densities.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "bruno/data.hpp"
#include "bruno/errors.hpp"
#include "bruno/model.hpp"

namespace bruno {

// A labelled bundle: k support sets of n items each plus one query drawn
// from the class at `target`.
template <typename S>
struct Episode {
  std::vector<MatX<S>> support;  // k entries, each D x n
  VecX<S> query;
  int target = 0;
};

// Draw an n-shot k-way episode: k distinct classes, the query's class at a
// uniformly random slot, supports sampled without replacement within each
// class. Preprocessing (dequantization) uses the supplied rng.
template <typename S>
Episode<S> sample_episode(const Dataset& data, long n, long k, Rng& rng,
                          const PreprocessConfig& pre) {
  const long C = data.num_classes();
  if (k > C)
    throw InsufficientData("episode: requested " + std::to_string(k) + "-way but only " +
                           std::to_string(C) + " classes");
  std::vector<int> classes(static_cast<std::size_t>(C));
  for (long c = 0; c < C; ++c) classes[std::size_t(c)] = int(c);
  for (long j = 0; j < k; ++j) {
    const auto pick = std::size_t(j) + std::size_t(rng.below(std::uint64_t(C - j)));
    std::swap(classes[std::size_t(j)], classes[pick]);
  }
  Episode<S> ep;
  ep.target = int(rng.below(std::uint64_t(k)));

  auto fetch = [&](int item) -> VecX<S> {
    const Eigen::VectorXd raw = data.items.col(item);
    if (pre.dequantize) return dequantize(raw, pre, rng).cast<S>();
    return raw.cast<S>();
  };

  ep.support.resize(std::size_t(k));
  for (long i = 0; i < k; ++i) {
    const auto& pool_src = data.class_index[std::size_t(classes[std::size_t(i)])];
    const long need = i == ep.target ? n + 1 : n;
    if (long(pool_src.size()) < need)
      throw InsufficientData("episode: class " + std::to_string(classes[std::size_t(i)]) +
                             " has " + std::to_string(pool_src.size()) + " items, needs " +
                             std::to_string(need));
    std::vector<int> pool = pool_src;
    for (long j = 0; j < need; ++j) {
      const auto pick = std::size_t(j) + std::size_t(rng.below(pool.size() - std::size_t(j)));
      std::swap(pool[std::size_t(j)], pool[pick]);
    }
    MatX<S>& sup = ep.support[std::size_t(i)];
    sup.resize(data.dim(), n);
    for (long j = 0; j < n; ++j) sup.col(j) = fetch(pool[std::size_t(j)]);
    if (i == ep.target) ep.query = fetch(pool[std::size_t(n)]);
  }
  return ep;
}

// log p(query | support_i) for every class i; the query's flow log-det is a
// shared additive constant across classes.
template <typename S>
VecX<S> class_log_scores(const BrunoModel<S>& m, const Episode<S>& ep) {
  const long k = long(ep.support.size());
  const long D = m.dim();
  S logdet = S(0);
  const VecX<S> zq = m.flow.forward(ep.query, &logdet);
  VecX<S> scores(k);
  for (long i = 0; i < k; ++i) {
    const MatX<S>& sup = ep.support[std::size_t(i)];
    S score = logdet;
    for (long d = 0; d < D; ++d) {
      const auto p = m.process(d);
      auto st = prior_state(p);
      for (long j = 0; j < sup.cols(); ++j) {
        const VecX<S> z = m.flow.forward(sup.col(j), nullptr);
        st = update_state(p, st, z[d]);
      }
      score += predictive_log_density(p, st, zq[d]);
    }
    scores[i] = score;
  }
  return scores;
}

namespace detail {
// flow each support column once and reuse latents across dimensions
template <typename S>
MatX<S> flow_all(const BrunoModel<S>& m, const MatX<S>& x) {
  MatX<S> Z(x.rows(), x.cols());
  for (long j = 0; j < x.cols(); ++j) Z.col(j) = m.flow.forward(x.col(j), nullptr);
  return Z;
}
}  // namespace detail

// Faster equivalent of class_log_scores (one flow pass per item).
template <typename S>
VecX<S> class_log_scores_fast(const BrunoModel<S>& m, const Episode<S>& ep) {
  const long k = long(ep.support.size());
  const long D = m.dim();
  S logdet = S(0);
  const VecX<S> zq = m.flow.forward(ep.query, &logdet);
  VecX<S> scores = VecX<S>::Constant(k, logdet);
  for (long i = 0; i < k; ++i) {
    const MatX<S> Z = detail::flow_all(m, ep.support[std::size_t(i)]);
    for (long d = 0; d < D; ++d) {
      const auto p = m.process(d);
      auto st = prior_state(p);
      for (long j = 0; j < Z.cols(); ++j) st = update_state(p, st, Z(d, j));
      scores[i] += predictive_log_density(p, st, zq[d]);
    }
  }
  return scores;
}

// argmax with ties broken by the lowest class index
template <typename S>
int few_shot_classify(const BrunoModel<S>& m, const Episode<S>& ep) {
  const VecX<S> scores = class_log_scores_fast(m, ep);
  int best = 0;
  for (long i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = int(i);
  return best;
}

struct FewShotResult {
  double accuracy = 0;
  long correct = 0;
  long episodes = 0;
};

inline double binomial_ci(double p, long n, double z = 1.96) {
  return z * std::sqrt(std::max(p * (1.0 - p), 0.0) / double(n));
}

// Mean accuracy over `episodes` sampled episodes; per-episode rng streams
// derive from (seed, episode index), so the result is order-independent.
template <typename S>
FewShotResult few_shot_eval(const BrunoModel<S>& m, const Dataset& data, long n, long k,
                            long episodes, std::uint64_t seed) {
  for (const auto& idx : data.class_index)
    if (long(idx.size()) < n + 1)
      throw InsufficientData("few_shot_eval: class with " + std::to_string(idx.size()) +
                             " items cannot provide " + std::to_string(n) + "-shot + query");
  FewShotResult r;
  r.episodes = episodes;
  for (long e = 0; e < episodes; ++e) {
    Rng rng = Rng::stream(seed, std::uint64_t(e));
    const Episode<S> ep = sample_episode<S>(data, n, k, rng, m.config.pre);
    if (few_shot_classify(m, ep) == ep.target) ++r.correct;
  }
  r.accuracy = double(r.correct) / double(episodes);
  return r;
}

// ---------------------------------------------------------------------------
// Discriminative fine-tuning
// ---------------------------------------------------------------------------

// Softmax cross-entropy over the class conditional log densities. The query
// log-det cancels between classes so the logits are latent-space only; the
// flow still receives gradients through every latent.
template <typename S>
S episode_nll_backward(const BrunoModel<S>& m, const Episode<S>& ep,
                       ModelGrads<S>& grads) {
  const long k = long(ep.support.size());
  const long D = m.dim();
  const long n = ep.support.empty() ? 0 : ep.support[0].cols();

  typename FlowStack<S>::Cache qcache;
  const VecX<S> zq = m.flow.forward(ep.query, nullptr, &qcache);

  std::vector<std::vector<typename FlowStack<S>::Cache>> scaches(static_cast<std::size_t>(k));
  std::vector<MatX<S>> Zs(static_cast<std::size_t>(k));
  VecX<S> logits(k);
  // per-class tapes over supports + query as final evaluation point
  std::vector<std::vector<ProcessTape<S>>> tapes(static_cast<std::size_t>(k));
  for (long i = 0; i < k; ++i) {
    const MatX<S>& sup = ep.support[std::size_t(i)];
    scaches[std::size_t(i)].resize(std::size_t(n));
    MatX<S>& Z = Zs[std::size_t(i)];
    Z.resize(D, n + 1);
    for (long j = 0; j < n; ++j)
      Z.col(j) = m.flow.forward(sup.col(j), nullptr, &scaches[std::size_t(i)][std::size_t(j)]);
    Z.col(n) = zq;
    tapes[std::size_t(i)].resize(std::size_t(D));
    S logit_i = S(0);
    std::vector<S> zrow(static_cast<std::size_t>(n + 1));
    for (long d = 0; d < D; ++d) {
      const auto p = m.process(d);
      for (long j = 0; j <= n; ++j) zrow[std::size_t(j)] = Z(d, j);
      process_forward(p, zrow.data(), n + 1, tapes[std::size_t(i)][std::size_t(d)]);
      logit_i += tapes[std::size_t(i)][std::size_t(d)].logp[std::size_t(n)];
    }
    logits[i] = logit_i;
  }

  const S lmax = logits.maxCoeff();
  VecX<S> pr = (logits.array() - lmax).exp();
  pr /= pr.sum();
  const S loss = -(logits[ep.target] - lmax - std::log((logits.array() - lmax).exp().sum()));

  VecX<S> gzq = VecX<S>::Zero(D);
  std::vector<S> zrow(static_cast<std::size_t>(n + 1));
  std::vector<S> gzrow(static_cast<std::size_t>(n + 1));
  std::vector<S> w(static_cast<std::size_t>(n + 1));
  for (long i = 0; i < k; ++i) {
    const S gl = pr[i] - (i == ep.target ? S(1) : S(0));
    std::fill(w.begin(), w.end(), S(0));
    w[std::size_t(n)] = gl;
    MatX<S> gZ = MatX<S>::Zero(D, n + 1);
    for (long d = 0; d < D; ++d) {
      const auto p = m.process(d);
      for (long j = 0; j <= n; ++j) zrow[std::size_t(j)] = Zs[std::size_t(i)](d, j);
      std::fill(gzrow.begin(), gzrow.end(), S(0));
      const auto pg = process_backward(p, zrow.data(), n + 1,
                                       tapes[std::size_t(i)][std::size_t(d)], w.data(),
                                       gzrow.data());
      accumulate_raw_grads(m, d, pg, grads);
      for (long j = 0; j <= n; ++j) gZ(d, j) = gzrow[std::size_t(j)];
    }
    for (long j = 0; j < n; ++j)
      flow_backward(m.flow, scaches[std::size_t(i)][std::size_t(j)], grads.flow,
                    VecX<S>(gZ.col(j)), S(0));
    gzq += gZ.col(n);
  }
  flow_backward(m.flow, qcache, grads.flow, gzq, S(0));
  return loss;
}

// Fine-tune with fixed n and k. iterations x batch_size episodes total;
// returns the per-iteration cross-entropy trace.
template <typename S>
TrainResult<S> discriminative_finetune(BrunoModel<S>& m, const Dataset& data, long n,
                                       long k, const TrainConfig& cfg) {
  RmsProp<S> opt(m, S(cfg.rmsprop_decay), S(cfg.rmsprop_eps));
  ModelGrads<S> grads;
  grads.match(m);
  TrainResult<S> result;
  for (long it = 0; it < cfg.iterations; ++it) {
    grads.setZero();
    double loss = 0;
    for (long b = 0; b < cfg.batch_size; ++b) {
      Rng rng = Rng::stream(cfg.seed ^ 0x51a8f3ull,
                            std::uint64_t(it) * std::uint64_t(cfg.batch_size) +
                                std::uint64_t(b));
      const Episode<S> ep = sample_episode<S>(data, n, k, rng, m.config.pre);
      try {
        loss += double(episode_nll_backward(m, ep, grads));
      } catch (const NonFiniteError& e) {
        throw Diverged(std::string("fine-tuning diverged at iteration ") +
                           std::to_string(it) + ": " + e.what(),
                       result.loss_trace);
      } catch (const DomainError& e) {
        throw Diverged(std::string("fine-tuning diverged at iteration ") +
                           std::to_string(it) + ": " + e.what(),
                       result.loss_trace);
      }
    }
    loss /= double(cfg.batch_size);
    if (!std::isfinite(loss))
      throw Diverged("fine-tuning loss became non-finite at iteration " + std::to_string(it),
                     result.loss_trace);
    result.loss_trace.push_back(loss);
    grads.finalize(m);
    if (!cfg.train_nu) grads.r_nu.setZero();
    const S inv_b = S(1) / S(cfg.batch_size);
    visit_params(m, grads, [&](S*, S* g, long nn, bool) {
      for (long j = 0; j < nn; ++j) g[j] *= inv_b;
    });
    opt.step(m, grads, S(cfg.learning_rate), S(cfg.learning_rate * cfg.process_lr_factor));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Online anomaly scoring
// ---------------------------------------------------------------------------

struct ScoreTrace {
  std::vector<double> log_scores;  // log p(x|x_1:n) - log p(x)
  std::vector<char> flags;         // 1 where score < threshold (if given)
};

// Bayesian-sets style density ratio, computed in latent space since the
// query's Jacobian term cancels between numerator and denominator. Each
// item is scored against the current state, then absorbed.
template <typename S>
ScoreTrace anomaly_score(const BrunoModel<S>& m, const MatX<S>& stream,
                         std::optional<double> threshold = std::nullopt) {
  const long N = stream.cols();
  const long D = m.dim();
  if (stream.rows() != D) throw ShapeMismatch("anomaly_score: wrong stream dimension");
  std::vector<ProcessParams<S>> params;
  std::vector<PredictiveState<S>> states, priors;
  for (long d = 0; d < D; ++d) {
    params.push_back(m.process(d));
    states.push_back(prior_state(params.back()));
    priors.push_back(states.back());
  }
  ScoreTrace tr;
  tr.log_scores.resize(std::size_t(N));
  tr.flags.assign(std::size_t(N), 0);
  for (long kk = 0; kk < N; ++kk) {
    const VecX<S> z = m.flow.forward(stream.col(kk), nullptr);
    double score = 0;
    for (long d = 0; d < D; ++d) {
      score += double(predictive_log_density(params[std::size_t(d)], states[std::size_t(d)], z[d]));
      score -= double(predictive_log_density(params[std::size_t(d)], priors[std::size_t(d)], z[d]));
    }
    tr.log_scores[std::size_t(kk)] = score;
    if (threshold && score < *threshold) tr.flags[std::size_t(kk)] = 1;
    for (long d = 0; d < D; ++d)
      states[std::size_t(d)] = update_state(params[std::size_t(d)], states[std::size_t(d)], z[d]);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Latent parameter analysis
// ---------------------------------------------------------------------------

struct LatentRow {
  int dim;
  double nu, v, rho, correlation;
};

struct LatentReport {
  std::vector<LatentRow> rows;
  // (epsilon, number of dimensions with rho/v > epsilon)
  std::vector<std::pair<double, long>> exceedance;
};

template <typename S>
LatentReport latent_analysis(const BrunoModel<S>& m) {
  LatentReport rep;
  const double eps_grid[] = {0.001, 0.01, 0.05, 0.1, 0.2, 0.5};
  for (long d = 0; d < m.dim(); ++d) {
    const auto p = m.process(d);
    rep.rows.push_back(
        {int(d), double(p.nu), double(p.v), double(p.rho), double(p.rho / p.v)});
  }
  for (double e : eps_grid) {
    long count = 0;
    for (const auto& r : rep.rows)
      if (r.correlation > e) ++count;
    rep.exceedance.emplace_back(e, count);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Paired GP-vs-TP training harness
// ---------------------------------------------------------------------------

struct ModeComparison {
  std::vector<double> tp_trace, gp_trace;
};

// Train a StudentT-mode and a Gaussian-mode model with identical seeds and
// data, optionally injecting a constant outlier element into the last slot
// of every sequence each `outlier_every` iterations.
template <typename S>
ModeComparison run_mode_comparison(const Dataset& data, ModelConfig mc, TrainConfig tc,
                                   long outlier_every = 0, double outlier_value = 8.0) {
  BatchHook hook;
  if (outlier_every > 0)
    hook = [=](long it, std::vector<Eigen::MatrixXd>& batch) {
      if (it % outlier_every != 0) return;
      for (auto& seq : batch) seq.col(seq.cols() - 1).setConstant(outlier_value);
    };
  ModeComparison cmp;
  {
    ModelConfig c = mc;
    c.mode = ProcessMode::StudentT;
    auto m = make_model<S>(c, tc.seed);
    cmp.tp_trace = train(m, data, tc, hook).loss_trace;
  }
  {
    ModelConfig c = mc;
    c.mode = ProcessMode::Gaussian;
    auto m = make_model<S>(c, tc.seed);
    cmp.gp_trace = train(m, data, tc, hook).loss_trace;
  }
  return cmp;
}

}  // namespace bruno
