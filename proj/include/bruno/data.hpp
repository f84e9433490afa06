#pragma once

// Datasets of fixed-dimension observations with class labels, the synthetic
// exchangeable generator, and sequence batching for training.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bruno/errors.hpp"
#include "bruno/rng.hpp"

namespace bruno {

struct Dataset {
  Eigen::MatrixXd items;  // D x N, columns are observations
  std::vector<int> labels;
  std::vector<std::vector<int>> class_index;

  long dim() const { return items.rows(); }
  long size() const { return items.cols(); }
  long num_classes() const { return long(class_index.size()); }

  void rebuild_index() {
    int max_label = -1;
    for (int l : labels) max_label = std::max(max_label, l);
    class_index.assign(std::size_t(max_label + 1), {});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0) throw DimensionMismatch("negative class label");
      class_index[std::size_t(labels[i])].push_back(int(i));
    }
    if (long(labels.size()) != items.cols())
      throw DimensionMismatch("label count " + std::to_string(labels.size()) +
                              " != item count " + std::to_string(items.cols()));
  }
};

// Per class: class mean m_c on a fixed grid (spacing * centered class index,
// identical in every dimension), one latent location theta^d ~ N(m_c, rho)
// per dimension, then items i.i.d. N(theta^d, 1-rho). Within a class this
// gives unit marginal variance and inter-item covariance rho per dimension.
inline Dataset synth_exchangeable(double rho, int dims, int classes, int per_class,
                                  std::uint64_t seed, double mean_spacing = 3.0) {
  if (!(rho >= 0.0 && rho < 1.0))
    throw ConstraintViolation("synth_exchangeable: rho must lie in [0, 1)");
  if (dims < 1 || classes < 1 || per_class < 1)
    throw ConstraintViolation("synth_exchangeable: sizes must be positive");
  Rng rng(seed);
  Dataset ds;
  ds.items.resize(dims, long(classes) * per_class);
  ds.labels.resize(std::size_t(classes) * std::size_t(per_class));
  long col = 0;
  for (int c = 0; c < classes; ++c) {
    const double m_c = mean_spacing * (double(c) - double(classes - 1) / 2.0);
    Eigen::VectorXd theta(dims);
    for (int d = 0; d < dims; ++d) theta[d] = m_c + std::sqrt(rho) * rng.normal();
    for (int i = 0; i < per_class; ++i, ++col) {
      for (int d = 0; d < dims; ++d)
        ds.items(d, col) = theta[d] + std::sqrt(1.0 - rho) * rng.normal();
      ds.labels[std::size_t(col)] = c;
    }
  }
  ds.rebuild_index();
  return ds;
}

// In-place per-dimension standardization; returns (mean, std) per dimension.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> standardize(Dataset& ds) {
  Eigen::VectorXd mean = ds.items.rowwise().mean();
  Eigen::VectorXd sd(ds.dim());
  for (long d = 0; d < ds.dim(); ++d) {
    const double var =
        (ds.items.row(d).array() - mean[d]).square().sum() / double(ds.size());
    sd[d] = std::sqrt(std::max(var, 1e-12));
    ds.items.row(d) = (ds.items.row(d).array() - mean[d]) / sd[d];
  }
  return {mean, sd};
}

// Batches of same-class sequences: each sequence uniformly samples a class,
// then seq_len items from it without replacement.
class EpisodeStream {
 public:
  EpisodeStream(const Dataset& data, long seq_len, long batch, std::uint64_t seed)
      : data_(&data), seq_len_(seq_len), batch_(batch), rng_(seed) {
    if (seq_len < 1 || batch < 1) throw ConstraintViolation("episode stream sizes");
    for (const auto& idx : data.class_index)
      if (long(idx.size()) < seq_len)
        throw InsufficientData("episode stream: class with " +
                               std::to_string(idx.size()) + " items < seq_len " +
                               std::to_string(seq_len));
  }

  std::vector<Eigen::MatrixXd> next() {
    std::vector<Eigen::MatrixXd> out;
    out.reserve(std::size_t(batch_));
    for (long b = 0; b < batch_; ++b) {
      const auto c = std::size_t(rng_.below(std::uint64_t(data_->num_classes())));
      std::vector<int> pool = data_->class_index[c];
      Eigen::MatrixXd seq(data_->dim(), seq_len_);
      for (long j = 0; j < seq_len_; ++j) {
        const auto pick = std::size_t(j) + std::size_t(rng_.below(pool.size() - std::size_t(j)));
        std::swap(pool[std::size_t(j)], pool[pick]);
        seq.col(j) = data_->items.col(pool[std::size_t(j)]);
      }
      out.push_back(std::move(seq));
    }
    return out;
  }

 private:
  const Dataset* data_;
  long seq_len_, batch_;
  Rng rng_;
};

}  // namespace bruno
