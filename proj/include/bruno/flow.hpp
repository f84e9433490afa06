#pragma once

// Invertible preprocessing (dequantize + logit) and stacked affine coupling
// layers with dense scale/translation networks. Forward passes can record a
// cache; backward() consumes it and accumulates exact reverse-mode parameter
// gradients, including the path through the log-det term.

#include <Eigen/Core>
#include <cmath>
#include <utility>
#include <vector>

#include "bruno/errors.hpp"
#include "bruno/numeric.hpp"
#include "bruno/rng.hpp"

namespace bruno {

struct PreprocessConfig {
  double alpha = 1e-6;   // logit stabilizer, 0 < alpha < 0.5
  int num_levels = 256;  // quantization levels for integer data
  bool dequantize = true;
  bool logit = true;  // disable for real-valued data: identity preprocessing

  bool operator==(const PreprocessConfig&) const = default;
};

inline void validate(const PreprocessConfig& c) {
  if (!(c.alpha > 0.0 && c.alpha < 0.5))
    throw ConstraintViolation("preprocess alpha must lie in (0, 0.5)");
  if (c.num_levels < 2) throw ConstraintViolation("num_levels must be >= 2");
}

// (x + u)/num_levels with u ~ U[0,1) elementwise; output in [0,1).
inline Eigen::VectorXd dequantize(const Eigen::VectorXd& x_int,
                                  const PreprocessConfig& cfg, Rng& rng) {
  Eigen::VectorXd out(x_int.size());
  for (long i = 0; i < x_int.size(); ++i) {
    const double p = x_int[i];
    if (!(p >= 0.0 && p < double(cfg.num_levels)))
      throw RangeError("dequantize: pixel value " + std::to_string(p) +
                       " outside [0, " + std::to_string(cfg.num_levels) + ")");
    out[i] = (p + rng.uniform()) / double(cfg.num_levels);
  }
  return out;
}

// y = logit(alpha + (1-2 alpha) x), per-coordinate log|dy/dx| summed.
template <typename S>
std::pair<VecX<S>, S> logit_forward(const PreprocessConfig& cfg, const VecX<S>& x) {
  const S a = S(cfg.alpha);
  const S w = S(1) - S(2) * a;
  VecX<S> y(x.size());
  S logdet = S(0);
  for (long i = 0; i < x.size(); ++i) {
    const S p = a + w * x[i];
    y[i] = std::log(p) - std::log1p(-p);
    logdet += std::log(w) - std::log(p) - std::log1p(-p);
  }
  return {std::move(y), logdet};
}

template <typename S>
VecX<S> logit_inverse(const PreprocessConfig& cfg, const VecX<S>& y) {
  const S a = S(cfg.alpha);
  const S w = S(1) - S(2) * a;
  VecX<S> x(y.size());
  for (long i = 0; i < y.size(); ++i) x[i] = (sigmoid(y[i]) - a) / w;
  return x;
}

namespace detail {
template <typename S>
inline S elu(S x) {
  return x > S(0) ? x : std::expm1(x);
}
// derivative recovered from the post-activation value
template <typename S>
inline S elu_deriv_from_post(S h) {
  return h > S(0) ? S(1) : h + S(1);
}
}  // namespace detail

// Dense layer; with weightnorm enabled W holds per-row directions and g the
// row magnitudes, so the effective weight row is g_i * W_i / |W_i|.
template <typename S>
struct DenseLayer {
  MatX<S> W;
  VecX<S> g;  // empty unless weightnorm
  VecX<S> b;
  bool weightnorm = false;

  void init(long out, long in, bool wn, S gain, Rng& rng) {
    weightnorm = wn;
    W.resize(out, in);
    const S scale = S(1) / S(std::sqrt(double(in)));
    for (long j = 0; j < in; ++j)
      for (long i = 0; i < out; ++i) W(i, j) = S(rng.normal()) * scale;
    b = VecX<S>::Zero(out);
    if (wn) {
      g = VecX<S>::Constant(out, gain);
    } else {
      g.resize(0);
      W *= gain;
    }
  }

  MatX<S> effective() const {
    if (!weightnorm) return W;
    MatX<S> e = W;
    for (long i = 0; i < W.rows(); ++i) {
      const S n = W.row(i).norm();
      e.row(i) *= g[i] / n;
    }
    return e;
  }

  VecX<S> apply(const VecX<S>& x) const { return effective() * x + b; }
};

// Gradient accumulators matching one dense layer. W accumulates in
// effective-weight space during backward; finalize() rewrites it into the
// (direction, magnitude) parameterization when weightnorm is on.
template <typename S>
struct DenseGrad {
  MatX<S> W;
  VecX<S> g;
  VecX<S> b;

  void match(const DenseLayer<S>& l) {
    W = MatX<S>::Zero(l.W.rows(), l.W.cols());
    g = VecX<S>::Zero(l.g.size());
    b = VecX<S>::Zero(l.b.size());
  }
  void setZero() {
    W.setZero();
    g.setZero();
    b.setZero();
  }
  void add(const DenseGrad& o) {
    W += o.W;
    g += o.g;
    b += o.b;
  }
  void finalize(const DenseLayer<S>& l) {
    if (!l.weightnorm) return;
    for (long i = 0; i < l.W.rows(); ++i) {
      const S n = l.W.row(i).norm();
      const VecX<S> wh = l.W.row(i).transpose() / n;
      const S dot = W.row(i) * wh;
      g[i] += dot;
      W.row(i) = (l.g[i] / n) * (W.row(i) - dot * wh.transpose());
    }
  }
};

// Accumulate dL/d(pre-activation) for one input; returns dL/dx.
template <typename S>
VecX<S> dense_backward(const DenseLayer<S>& l, DenseGrad<S>& grad,
                       const VecX<S>& x, const VecX<S>& gpre) {
  const MatX<S> e = l.effective();
  grad.W.noalias() += gpre * x.transpose();
  grad.b += gpre;
  return e.transpose() * gpre;
}

// Affine coupling layer: the pass-through half feeds a shared
// two-layer ELU trunk; the s head ends in tanh, bounding each scale
// log-factor to (-1, 1), and the t head is linear.
template <typename S>
struct CouplingLayer {
  std::vector<int> pass_idx, trans_idx;
  DenseLayer<S> fc1, fc2, s_head, t_head;

  struct Cache {
    VecX<S> u;       // full layer input
    VecX<S> h1, h2;  // trunk post-activations
    VecX<S> s, t;    // head outputs (s after tanh)
  };

  // transform_odd selects which parity of indices is rewritten
  void init(long dim, long hidden, bool transform_odd, bool wn, Rng& rng) {
    pass_idx.clear();
    trans_idx.clear();
    for (int i = 0; i < dim; ++i)
      ((i % 2 == 1) == transform_odd ? trans_idx : pass_idx).push_back(i);
    if (pass_idx.empty() || trans_idx.empty())
      throw ShapeMismatch("coupling layer needs both halves non-empty (dim >= 2)");
    const long np = long(pass_idx.size());
    const long nt = long(trans_idx.size());
    fc1.init(hidden, np, wn, S(1), rng);
    fc2.init(hidden, hidden, wn, S(1), rng);
    // zero-gain heads make the freshly built layer an exact identity
    s_head.init(nt, hidden, wn, S(0), rng);
    t_head.init(nt, hidden, wn, S(0), rng);
  }

  VecX<S> gather_pass(const VecX<S>& x) const {
    VecX<S> xp(pass_idx.size());
    for (std::size_t j = 0; j < pass_idx.size(); ++j) xp[long(j)] = x[pass_idx[j]];
    return xp;
  }

  VecX<S> forward(const VecX<S>& x, S* logdet, Cache* cache) const {
    const VecX<S> xp = gather_pass(x);
    VecX<S> h1 = fc1.apply(xp);
    for (long i = 0; i < h1.size(); ++i) h1[i] = detail::elu(h1[i]);
    VecX<S> h2 = fc2.apply(h1);
    for (long i = 0; i < h2.size(); ++i) h2[i] = detail::elu(h2[i]);
    VecX<S> s = s_head.apply(h2);
    for (long i = 0; i < s.size(); ++i) s[i] = std::tanh(s[i]);
    VecX<S> t = t_head.apply(h2);
    VecX<S> y = x;
    for (std::size_t j = 0; j < trans_idx.size(); ++j)
      y[trans_idx[j]] = x[trans_idx[j]] * std::exp(s[long(j)]) + t[long(j)];
    if (logdet) *logdet += s.sum();
    if (cache) *cache = Cache{x, std::move(h1), std::move(h2), std::move(s), std::move(t)};
    return y;
  }

  VecX<S> inverse(const VecX<S>& y) const {
    const VecX<S> yp = gather_pass(y);
    VecX<S> h1 = fc1.apply(yp);
    for (long i = 0; i < h1.size(); ++i) h1[i] = detail::elu(h1[i]);
    VecX<S> h2 = fc2.apply(h1);
    for (long i = 0; i < h2.size(); ++i) h2[i] = detail::elu(h2[i]);
    VecX<S> s = s_head.apply(h2);
    for (long i = 0; i < s.size(); ++i) s[i] = std::tanh(s[i]);
    const VecX<S> t = t_head.apply(h2);
    VecX<S> x = y;
    for (std::size_t j = 0; j < trans_idx.size(); ++j)
      x[trans_idx[j]] = (y[trans_idx[j]] - t[long(j)]) * std::exp(-s[long(j)]);
    return x;
  }
};

template <typename S>
struct CouplingGrad {
  DenseGrad<S> fc1, fc2, s_head, t_head;

  void match(const CouplingLayer<S>& l) {
    fc1.match(l.fc1);
    fc2.match(l.fc2);
    s_head.match(l.s_head);
    t_head.match(l.t_head);
  }
  void setZero() {
    fc1.setZero();
    fc2.setZero();
    s_head.setZero();
    t_head.setZero();
  }
  void add(const CouplingGrad& o) {
    fc1.add(o.fc1);
    fc2.add(o.fc2);
    s_head.add(o.s_head);
    t_head.add(o.t_head);
  }
  void finalize(const CouplingLayer<S>& l) {
    fc1.finalize(l.fc1);
    fc2.finalize(l.fc2);
    s_head.finalize(l.s_head);
    t_head.finalize(l.t_head);
  }
};

// dL/d(layer input) given dL/d(layer output) and the shared dL/d(logdet)
// coefficient; parameter gradients accumulate into `grads`.
template <typename S>
VecX<S> coupling_backward(const CouplingLayer<S>& l,
                          const typename CouplingLayer<S>::Cache& c,
                          CouplingGrad<S>& grads, const VecX<S>& gy, S g_logdet) {
  const long nt = long(l.trans_idx.size());
  VecX<S> g_s(nt), g_t(nt), g_xt(nt);
  for (long j = 0; j < nt; ++j) {
    const S gy_t = gy[l.trans_idx[std::size_t(j)]];
    const S es = std::exp(c.s[j]);
    g_xt[j] = gy_t * es;
    g_s[j] = gy_t * c.u[l.trans_idx[std::size_t(j)]] * es + g_logdet;
    g_t[j] = gy_t;
  }
  VecX<S> g_sraw(nt);
  for (long j = 0; j < nt; ++j) g_sraw[j] = g_s[j] * (S(1) - c.s[j] * c.s[j]);

  VecX<S> gh2 = dense_backward(l.s_head, grads.s_head, c.h2, g_sraw);
  gh2 += dense_backward(l.t_head, grads.t_head, c.h2, g_t);
  for (long i = 0; i < gh2.size(); ++i) gh2[i] *= detail::elu_deriv_from_post(c.h2[i]);
  VecX<S> gh1 = dense_backward(l.fc2, grads.fc2, c.h1, gh2);
  for (long i = 0; i < gh1.size(); ++i) gh1[i] *= detail::elu_deriv_from_post(c.h1[i]);
  const VecX<S> xp = l.gather_pass(c.u);
  const VecX<S> gxp = dense_backward(l.fc1, grads.fc1, xp, gh1);

  VecX<S> gx = VecX<S>::Zero(c.u.size());
  for (std::size_t j = 0; j < l.pass_idx.size(); ++j)
    gx[l.pass_idx[j]] = gy[l.pass_idx[j]] + gxp[long(j)];
  for (long j = 0; j < nt; ++j) gx[l.trans_idx[std::size_t(j)]] = g_xt[j];
  return gx;
}

// Stack of coupling layers behind the (optional) logit preprocessing, with
// masks alternating between odd and even transformed indices.
template <typename S>
struct FlowStack {
  PreprocessConfig pre;
  int dim = 0;
  std::vector<CouplingLayer<S>> layers;

  struct Cache {
    std::vector<typename CouplingLayer<S>::Cache> layer;
  };

  void init(int d, int depth, int hidden, bool weightnorm, const PreprocessConfig& cfg,
            Rng& rng) {
    validate(cfg);
    pre = cfg;
    dim = d;
    layers.resize(std::size_t(depth));
    for (int i = 0; i < depth; ++i)
      layers[std::size_t(i)].init(d, hidden, i % 2 == 0, weightnorm, rng);
  }

  VecX<S> forward(const VecX<S>& x, S* logdet, Cache* cache = nullptr) const {
    if (x.size() != dim) throw ShapeMismatch("flow forward: wrong input dimension");
    VecX<S> y;
    if (pre.logit) {
      auto [ly, ld] = logit_forward<S>(pre, x);
      y = std::move(ly);
      if (logdet) *logdet += ld;
    } else {
      y = x;
    }
    if (cache) cache->layer.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i)
      y = layers[i].forward(y, logdet, cache ? &cache->layer[i] : nullptr);
    return y;
  }

  VecX<S> inverse(const VecX<S>& z) const {
    if (z.size() != dim) throw ShapeMismatch("flow inverse: wrong input dimension");
    VecX<S> y = z;
    for (std::size_t i = layers.size(); i-- > 0;) y = layers[i].inverse(y);
    return pre.logit ? logit_inverse<S>(pre, y) : y;
  }
};

template <typename S>
struct FlowGrads {
  std::vector<CouplingGrad<S>> layers;

  void match(const FlowStack<S>& f) {
    layers.resize(f.layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].match(f.layers[i]);
  }
  void setZero() {
    for (auto& l : layers) l.setZero();
  }
  void add(const FlowGrads& o) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].add(o.layers[i]);
  }
  void finalize(const FlowStack<S>& f) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].finalize(f.layers[i]);
  }
};

// Parameter gradients for one flow evaluation: gz is dL/dz at the output,
// g_logdet multiplies every layer's logdet contribution. The input-side
// gradient is discarded (inputs are data) and the logit layer has no
// parameters, so backprop stops after the first coupling layer.
template <typename S>
void flow_backward(const FlowStack<S>& f, const typename FlowStack<S>::Cache& c,
                   FlowGrads<S>& grads, VecX<S> gz, S g_logdet) {
  if (c.layer.size() != f.layers.size())
    throw ShapeMismatch("flow backward: cache does not match stack depth");
  for (std::size_t i = f.layers.size(); i-- > 0;)
    gz = coupling_backward(f.layers[i], c.layer[i], grads.layers[i], gz, g_logdet);
}

// Data-dependent weightnorm initialization: walk the stack in forward order
// and set each dense layer's magnitude and bias so its pre-activations over
// the batch have mean 0 and variance 1. Zero-variance units fall back to
// magnitude 1 (bias still centers them); the return value counts them.
template <typename S>
int weightnorm_init(FlowStack<S>& f, const MatX<S>& batch) {
  const long B = batch.cols();
  if (batch.rows() != f.dim) throw ShapeMismatch("weightnorm_init: wrong batch dimension");
  if (B < 2) throw DomainError("weightnorm_init: need at least 2 batch items");
  MatX<S> X(f.dim, B);
  for (long b = 0; b < B; ++b) {
    if (f.pre.logit)
      X.col(b) = logit_forward<S>(f.pre, VecX<S>(batch.col(b))).first;
    else
      X.col(b) = batch.col(b);
  }
  int degenerate = 0;

  auto init_dense = [&](DenseLayer<S>& l, const MatX<S>& in) -> MatX<S> {
    if (!l.weightnorm) throw DomainError("weightnorm_init: layer has weightnorm disabled");
    MatX<S> dir = l.W;
    for (long i = 0; i < dir.rows(); ++i) dir.row(i) /= dir.row(i).norm();
    MatX<S> T = dir * in;  // unit-direction projections, rows = units
    for (long i = 0; i < T.rows(); ++i) {
      const S m = T.row(i).mean();
      const S var = (T.row(i).array() - m).square().sum() / S(B);
      const S sd = std::sqrt(var);
      if (sd < S(1e-12)) {
        ++degenerate;
        l.g[i] = S(1);
        l.b[i] = -m;
      } else {
        l.g[i] = S(1) / sd;
        l.b[i] = -m / sd;
      }
      T.row(i) = (T.row(i).array() * l.g[i] + l.b[i]).matrix();
    }
    return T;  // pre-activations with the new parameters
  };

  for (auto& layer : f.layers) {
    MatX<S> XP(layer.pass_idx.size(), B);
    for (std::size_t j = 0; j < layer.pass_idx.size(); ++j)
      XP.row(long(j)) = X.row(layer.pass_idx[j]);
    MatX<S> H1 = init_dense(layer.fc1, XP);
    H1 = H1.unaryExpr([](S x) { return detail::elu(x); });
    MatX<S> H2 = init_dense(layer.fc2, H1);
    H2 = H2.unaryExpr([](S x) { return detail::elu(x); });
    MatX<S> Sb = init_dense(layer.s_head, H2);
    Sb = Sb.unaryExpr([](S x) { return std::tanh(x); });
    const MatX<S> Tb = init_dense(layer.t_head, H2);
    for (std::size_t j = 0; j < layer.trans_idx.size(); ++j) {
      const int r = layer.trans_idx[j];
      for (long b = 0; b < B; ++b)
        X(r, b) = X(r, b) * std::exp(Sb(long(j), b)) + Tb(long(j), b);
    }
  }
  return degenerate;
}

}  // namespace bruno
