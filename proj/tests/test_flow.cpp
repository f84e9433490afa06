#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "bruno/flow.hpp"
#include "bruno/model.hpp"

using namespace bruno;

namespace {

// random nonzero parameters everywhere, so the flow is not the identity
template <typename S>
void perturb_flow(FlowStack<S>& f, double scale, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& layer : f.layers) {
    for (DenseLayer<S>* d : {&layer.fc1, &layer.fc2, &layer.s_head, &layer.t_head}) {
      for (long i = 0; i < d->W.size(); ++i) d->W.data()[i] += S(scale * rng.normal());
      for (long i = 0; i < d->g.size(); ++i) d->g[i] += S(scale * rng.normal());
      for (long i = 0; i < d->b.size(); ++i) d->b[i] += S(scale * rng.normal());
    }
  }
}

FlowStack<double> make_flow(int dim, int depth, int hidden, bool weightnorm,
                            const PreprocessConfig& pre, std::uint64_t seed) {
  FlowStack<double> f;
  Rng rng(seed);
  f.init(dim, depth, hidden, weightnorm, pre, rng);
  return f;
}

// log|det| of the numerically differentiated full Jacobian
double fd_log_abs_det(const FlowStack<double>& f, const VecX<double>& x, double h = 1e-6) {
  const long D = x.size();
  Eigen::MatrixXd J(D, D);
  for (long j = 0; j < D; ++j) {
    VecX<double> xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    J.col(j) = (f.forward(xp, nullptr) - f.forward(xm, nullptr)) / (2 * h);
  }
  return std::log(std::abs(J.determinant()));
}

}  // namespace

TEST_CASE("dequantize maps integer pixels into [0,1) slots") {
  PreprocessConfig cfg;
  Rng rng(1);
  Eigen::VectorXd x(3);
  x << 0, 255, 17;
  const Eigen::VectorXd y = dequantize(x, cfg, rng);
  CHECK(y[0] >= 0.0);
  CHECK(y[0] < 1.0 / 256);
  CHECK(y[1] >= 255.0 / 256);
  CHECK(y[1] < 1.0);
  CHECK(y[2] >= 17.0 / 256);
  CHECK(y[2] < 18.0 / 256);

  Rng a(7), b(7);
  CHECK(dequantize(x, cfg, a) == dequantize(x, cfg, b));

  Eigen::VectorXd bad(1);
  bad << 256;
  CHECK_THROWS_AS(dequantize(bad, cfg, rng), RangeError);
  bad << -1;
  CHECK_THROWS_AS(dequantize(bad, cfg, rng), RangeError);
}

TEST_CASE("logit preprocessing") {
  PreprocessConfig cfg;  // alpha = 1e-6
  SUBCASE("x = 0.5 maps to zero") {
    VecX<double> x(1);
    x << 0.5;
    const auto [y, logdet] = logit_forward<double>(cfg, x);
    CHECK(std::abs(y[0]) < 1e-12);
    (void)logdet;
  }
  SUBCASE("round trip on a grid") {
    for (int i = 0; i < 64; ++i) {
      VecX<double> x(1);
      x << double(i) / 64.0;
      const auto [y, logdet] = logit_forward<double>(cfg, x);
      (void)logdet;
      CHECK(std::abs(logit_inverse<double>(cfg, y)[0] - x[0]) < 1e-10);
    }
  }
  SUBCASE("log-det at the symmetry point, alpha = 0") {
    PreprocessConfig raw = cfg;
    raw.alpha = 0.0;
    VecX<double> x(1);
    x << 0.5;
    const auto [y, logdet] = logit_forward<double>(raw, x);
    (void)y;
    CHECK(logdet == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    // cross-check by finite differences
    const double h = 1e-7;
    VecX<double> xp(1), xm(1);
    xp << 0.5 + h;
    xm << 0.5 - h;
    const double fd =
        (logit_forward<double>(raw, xp).first[0] - logit_forward<double>(raw, xm).first[0]) /
        (2 * h);
    CHECK(logdet == doctest::Approx(std::log(std::abs(fd))).epsilon(1e-6));
  }
  SUBCASE("inverse lands inside the stated interval") {
    const double lo = -cfg.alpha / (1 - 2 * cfg.alpha);
    const double hi = (1 - cfg.alpha) / (1 - 2 * cfg.alpha);
    VecX<double> y(3);
    y << -40.0, 0.0, 40.0;
    const VecX<double> x = logit_inverse<double>(cfg, y);
    for (long i = 0; i < 3; ++i) {
      CHECK(x[i] > lo - 1e-15);
      CHECK(x[i] < hi + 1e-15);
    }
  }
}

TEST_CASE("coupling layer") {
  PreprocessConfig pre;
  pre.logit = false;
  SUBCASE("zero-initialized heads give the identity with zero log-det") {
    auto f = make_flow(6, 1, 8, false, pre, 3);
    VecX<double> x(6);
    x << 0.3, -1.2, 0.8, 2.5, -0.4, 0.0;
    double logdet = 0;
    const VecX<double> y = f.layers[0].forward(x, &logdet, nullptr);
    CHECK(y == x);
    CHECK(logdet == 0.0);
  }
  SUBCASE("inverse undoes forward") {
    for (bool wn : {false, true}) {
      auto f = make_flow(7, 1, 12, wn, pre, 4);
      perturb_flow(f, 0.3, 5);
      Rng rng(6);
      for (int t = 0; t < 10; ++t) {
        VecX<double> x(7);
        for (int i = 0; i < 7; ++i) x[i] = rng.normal();
        const VecX<double> y = f.layers[0].forward(x, nullptr, nullptr);
        CHECK((f.layers[0].inverse(y) - x).lpNorm<Eigen::Infinity>() < 1e-8);
      }
    }
  }
  SUBCASE("analytic log-det matches the numerical Jacobian at D = 4") {
    auto f = make_flow(4, 1, 10, true, pre, 8);
    perturb_flow(f, 0.4, 9);
    Rng rng(10);
    for (int t = 0; t < 5; ++t) {
      VecX<double> x(4);
      for (int i = 0; i < 4; ++i) x[i] = rng.normal();
      double logdet = 0;
      f.forward(x, &logdet);
      CHECK(std::abs(logdet - fd_log_abs_det(f, x)) < 1e-4);
    }
  }
}

TEST_CASE("flow stack") {
  SUBCASE("a single identity layer reduces to the logit transform") {
    PreprocessConfig pre;  // logit on
    auto f = make_flow(6, 1, 8, false, pre, 11);
    Rng rng(12);
    VecX<double> x(6);
    for (int i = 0; i < 6; ++i) x[i] = rng.uniform();
    double logdet_flow = 0;
    const VecX<double> z = f.forward(x, &logdet_flow);
    const auto [z_logit, logdet_logit] = logit_forward<double>(pre, x);
    CHECK((z - z_logit).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(logdet_flow == logdet_logit);
  }
  SUBCASE("round trip at D = 784, depth 6") {
    PreprocessConfig pre;
    auto f = make_flow(784, 6, 128, true, pre, 13);
    perturb_flow(f, 0.05, 14);
    Rng rng(15);
    for (int t = 0; t < 3; ++t) {
      VecX<double> x(784);
      for (int i = 0; i < 784; ++i) x[i] = rng.uniform();
      const VecX<double> z = f.forward(x, nullptr);
      CHECK((f.inverse(z) - x).lpNorm<Eigen::Infinity>() < 1e-6);
    }
  }
  SUBCASE("full-stack log-det vs numerical Jacobian at D = 6") {
    PreprocessConfig pre;
    pre.logit = false;
    auto f = make_flow(6, 4, 10, true, pre, 16);
    perturb_flow(f, 0.3, 17);
    Rng rng(18);
    VecX<double> x(6);
    for (int i = 0; i < 6; ++i) x[i] = rng.normal();
    double logdet = 0;
    f.forward(x, &logdet);
    CHECK(std::abs(logdet - fd_log_abs_det(f, x)) < 1e-4);
  }
  SUBCASE("consecutive layers alternate the transformed half") {
    PreprocessConfig pre;
    auto f = make_flow(8, 4, 8, false, pre, 19);
    for (std::size_t i = 0; i + 1 < f.layers.size(); ++i)
      CHECK(f.layers[i].trans_idx != f.layers[i + 1].trans_idx);
  }
}

TEST_CASE("flow backward") {
  PreprocessConfig pre;
  pre.logit = false;
  SUBCASE("zero upstream gradient gives zero parameter gradients") {
    auto f = make_flow(6, 2, 8, true, pre, 20);
    perturb_flow(f, 0.3, 21);
    FlowGrads<double> g;
    g.match(f);
    g.setZero();
    typename FlowStack<double>::Cache cache;
    VecX<double> x = VecX<double>::Constant(6, 0.2);
    f.forward(x, nullptr, &cache);
    flow_backward(f, cache, g, VecX<double>(VecX<double>::Zero(6)), 0.0);
    g.finalize(f);
    for (const auto& lg : g.layers)
      for (const DenseGrad<double>* d : {&lg.fc1, &lg.fc2, &lg.s_head, &lg.t_head}) {
        CHECK(d->W.cwiseAbs().maxCoeff() == 0.0);
        CHECK(d->b.cwiseAbs().maxCoeff() == 0.0);
        if (d->g.size()) CHECK(d->g.cwiseAbs().maxCoeff() == 0.0);
      }
  }
  SUBCASE("identity init: log-det gradient on the s-head bias is all ones") {
    auto f = make_flow(6, 1, 8, false, pre, 22);
    FlowGrads<double> g;
    g.match(f);
    g.setZero();
    typename FlowStack<double>::Cache cache;
    VecX<double> x(6);
    x << 1, -1, 2, -2, 0.5, 0.3;
    double logdet = 0;
    f.forward(x, &logdet, &cache);
    CHECK(logdet == 0.0);
    flow_backward(f, cache, g, VecX<double>(VecX<double>::Zero(6)), 1.0);
    // d logdet / d b_s = tanh'(0) = 1 per transformed dimension
    for (long i = 0; i < g.layers[0].s_head.b.size(); ++i)
      CHECK(g.layers[0].s_head.b[i] == 1.0);
    CHECK(g.layers[0].s_head.b.sum() ==
          doctest::Approx(double(f.layers[0].trans_idx.size())));
    // finite-difference cross-check on one bias entry
    const double h = 1e-6;
    f.layers[0].s_head.b[0] += h;
    double lp = 0;
    f.forward(x, &lp);
    f.layers[0].s_head.b[0] -= 2 * h;
    double lm = 0;
    f.forward(x, &lm);
    CHECK((lp - lm) / (2 * h) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("parameter gradients match central differences through z and logdet") {
    // loss = sum(z) + 0.5 * logdet on a fixed input
    for (bool wn : {false, true}) {
      auto f = make_flow(8, 2, 8, wn, pre, 23);
      perturb_flow(f, 0.3, 24);
      VecX<double> x(8);
      Rng rng(25);
      for (int i = 0; i < 8; ++i) x[i] = rng.normal();

      FlowGrads<double> g;
      g.match(f);
      g.setZero();
      typename FlowStack<double>::Cache cache;
      f.forward(x, nullptr, &cache);
      flow_backward(f, cache, g, VecX<double>(VecX<double>::Ones(8)), 0.5);
      g.finalize(f);

      auto loss = [&] {
        double logdet = 0;
        return f.forward(x, &logdet).sum() + 0.5 * logdet;
      };
      const double h = 1e-5;
      double worst = 0;
      for (std::size_t li = 0; li < f.layers.size(); ++li) {
        auto& L = f.layers[li];
        auto& G = g.layers[li];
        std::pair<DenseLayer<double>*, DenseGrad<double>*> pairs[] = {
            {&L.fc1, &G.fc1}, {&L.fc2, &G.fc2}, {&L.s_head, &G.s_head}, {&L.t_head, &G.t_head}};
        for (auto [dl, dg] : pairs) {
          std::pair<double*, const double*> spans[] = {
              {dl->W.data(), dg->W.data()},
              {dl->b.data(), dg->b.data()},
              {dl->g.size() ? dl->g.data() : nullptr, dg->g.size() ? dg->g.data() : nullptr}};
          long sizes[] = {dl->W.size(), dl->b.size(), dl->g.size()};
          for (int s = 0; s < 3; ++s) {
            for (long j = 0; j < sizes[s]; ++j) {
              double* p = spans[s].first + j;
              const double orig = *p;
              *p = orig + h;
              const double fp = loss();
              *p = orig - h;
              const double fm = loss();
              *p = orig;
              const double fd = (fp - fm) / (2 * h);
              const double an = spans[s].second[j];
              worst = std::max(worst,
                               std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4}));
            }
          }
        }
      }
      CHECK(worst < 1e-3);
    }
  }
}

TEST_CASE("s and t depend only on the pass-through half") {
  PreprocessConfig pre;
  pre.logit = false;
  auto f = make_flow(8, 1, 8, true, pre, 26);
  perturb_flow(f, 0.4, 27);
  const auto& layer = f.layers[0];
  Rng rng(28);
  VecX<double> x(8);
  for (int i = 0; i < 8; ++i) x[i] = rng.normal();
  typename CouplingLayer<double>::Cache c1, c2;
  layer.forward(x, nullptr, &c1);
  VecX<double> x2 = x;
  for (int idx : layer.trans_idx) x2[idx] += rng.normal();
  layer.forward(x2, nullptr, &c2);
  CHECK(c1.s == c2.s);
  CHECK(c1.t == c2.t);
  // and the pass-through half is copied verbatim
  const VecX<double> y = layer.forward(x, nullptr, nullptr);
  for (int idx : layer.pass_idx) CHECK(y[idx] == x[idx]);
}

TEST_CASE("per-layer log-det is bounded by the transformed dimension count") {
  PreprocessConfig pre;
  pre.logit = false;
  auto f = make_flow(9, 3, 12, true, pre, 29);
  perturb_flow(f, 2.0, 30);  // large weights push tanh toward saturation
  Rng rng(31);
  for (int t = 0; t < 20; ++t) {
    VecX<double> x(9);
    for (int i = 0; i < 9; ++i) x[i] = 3 * rng.normal();
    VecX<double> u = x;
    for (const auto& layer : f.layers) {
      double logdet = 0;
      u = layer.forward(u, &logdet, nullptr);
      CHECK(std::abs(logdet) <= double(layer.trans_idx.size()));
    }
  }
}

TEST_CASE("weightnorm data-dependent initialization") {
  PreprocessConfig pre;
  pre.logit = false;
  SUBCASE("pre-activations are normalized over the init batch") {
    FlowStack<double> f;
    Rng rng(32);
    f.init(6, 2, 8, true, pre, rng);
    MatX<double> batch(6, 64);
    for (long i = 0; i < batch.size(); ++i) batch.data()[i] = rng.normal();
    const int degenerate = weightnorm_init(f, batch);
    CHECK(degenerate == 0);

    // recompute every dense pre-activation over the batch and check stats
    MatX<double> X = batch;
    for (const auto& layer : f.layers) {
      MatX<double> XP(layer.pass_idx.size(), X.cols());
      for (std::size_t j = 0; j < layer.pass_idx.size(); ++j)
        XP.row(long(j)) = X.row(layer.pass_idx[j]);
      MatX<double> cur = XP;
      for (const DenseLayer<double>* d : {&layer.fc1, &layer.fc2}) {
        MatX<double> pre_act = d->effective() * cur;
        pre_act.colwise() += d->b;
        for (long i = 0; i < pre_act.rows(); ++i) {
          const double m = pre_act.row(i).mean();
          const double sd =
              std::sqrt((pre_act.row(i).array() - m).square().sum() / double(pre_act.cols()));
          CHECK(std::abs(m) < 1e-6);
          CHECK(std::abs(sd - 1.0) < 1e-6);
        }
        cur = pre_act.unaryExpr([](double v) { return v > 0 ? v : std::expm1(v); });
      }
      for (const DenseLayer<double>* d : {&layer.s_head, &layer.t_head}) {
        MatX<double> pre_act = d->effective() * cur;
        pre_act.colwise() += d->b;
        for (long i = 0; i < pre_act.rows(); ++i) {
          const double m = pre_act.row(i).mean();
          const double sd =
              std::sqrt((pre_act.row(i).array() - m).square().sum() / double(pre_act.cols()));
          CHECK(std::abs(m) < 1e-6);
          CHECK(std::abs(sd - 1.0) < 1e-6);
        }
      }
      // advance through the full coupling layer with the new parameters
      MatX<double> next = X;
      for (long b = 0; b < X.cols(); ++b)
        next.col(b) = layer.forward(X.col(b), nullptr, nullptr);
      X = next;
    }
  }
  SUBCASE("constant batch falls back without NaNs") {
    FlowStack<double> f;
    Rng rng(33);
    f.init(4, 1, 6, true, pre, rng);
    const MatX<double> batch = MatX<double>::Constant(4, 16, 0.7);
    const int degenerate = weightnorm_init(f, batch);
    CHECK(degenerate > 0);
    const VecX<double> z = f.forward(VecX<double>::Constant(4, 0.7), nullptr);
    for (long i = 0; i < z.size(); ++i) CHECK(std::isfinite(z[i]));
  }
  SUBCASE("idempotent on the same batch") {
    FlowStack<double> f;
    Rng rng(34);
    f.init(5, 2, 6, true, pre, rng);
    MatX<double> batch(5, 32);
    for (long i = 0; i < batch.size(); ++i) batch.data()[i] = rng.normal();
    weightnorm_init(f, batch);
    std::vector<double> first;
    ModelGrads<double> dummy;
    for (auto& layer : f.layers)
      for (DenseLayer<double>* d : {&layer.fc1, &layer.fc2, &layer.s_head, &layer.t_head}) {
        first.insert(first.end(), d->W.data(), d->W.data() + d->W.size());
        first.insert(first.end(), d->g.data(), d->g.data() + d->g.size());
        first.insert(first.end(), d->b.data(), d->b.data() + d->b.size());
      }
    weightnorm_init(f, batch);
    std::size_t idx = 0;
    for (auto& layer : f.layers)
      for (DenseLayer<double>* d : {&layer.fc1, &layer.fc2, &layer.s_head, &layer.t_head}) {
        for (long i = 0; i < d->W.size(); ++i)
          CHECK(std::abs(d->W.data()[i] - first[idx++]) < 1e-6);
        for (long i = 0; i < d->g.size(); ++i) CHECK(std::abs(d->g[i] - first[idx++]) < 1e-6);
        for (long i = 0; i < d->b.size(); ++i) CHECK(std::abs(d->b[i] - first[idx++]) < 1e-6);
      }
  }
  SUBCASE("requires weightnorm layers") {
    FlowStack<double> f;
    Rng rng(35);
    f.init(4, 1, 6, false, pre, rng);
    CHECK_THROWS_AS(weightnorm_init(f, MatX<double>(MatX<double>::Random(4, 8))), DomainError);
  }
}
