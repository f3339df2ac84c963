#pragma once

#include <cmath>
#include <vector>

#include "translab/model.hpp"
#include "translab/rng.hpp"
#include "translab/tensor.hpp"
#include "translab/train.hpp"

namespace translab::testing {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

// Relative error with a unit floor, the usual gradient-check metric.
inline double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

// Central finite difference of the summed per-example cross-entropy loss with
// respect to one input coordinate. Independent oracle for input_gradient.
inline double fd_input_grad(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                            std::size_t coord, double step) {
  Tensor plus = batch, minus = batch;
  plus.values[coord] += step;
  minus.values[coord] -= step;
  const double lp = softmax_cross_entropy(forward(m, plus), labels, nullptr, false);
  const double lm = softmax_cross_entropy(forward(m, minus), labels, nullptr, false);
  return (lp - lm) / (2.0 * step);
}

// Same oracle for one parameter coordinate.
inline double fd_param_grad(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                            std::size_t param_idx, std::size_t coord, double step) {
  Model plus = m, minus = m;
  plus.params[param_idx].values[coord] += step;
  minus.params[param_idx].values[coord] -= step;
  const double lp = softmax_cross_entropy(forward(plus, batch), labels, nullptr, false);
  const double lm = softmax_cross_entropy(forward(minus, batch), labels, nullptr, false);
  return (lp - lm) / (2.0 * step);
}

// K-class prototype data: one random prototype per class plus Gaussian noise.
inline Examples make_prototype_data(int classes, int dim, int per_class, double noise,
                                    std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> protos(classes, std::vector<double>(dim));
  for (auto& p : protos)
    for (double& v : p) v = rng.uniform(-1.0, 1.0);
  Examples ex;
  ex.images = Tensor::zeros({classes * per_class, dim});
  ex.labels.resize(classes * per_class);
  for (int i = 0; i < classes * per_class; ++i) {
    const int cls = i % classes;
    for (int j = 0; j < dim; ++j) ex.images.at(i, j) = protos[cls][j] + noise * rng.normal();
    ex.labels[i] = cls;
  }
  return ex;
}

// Small trained classifier for attack tests.
inline Model train_tiny(const Examples& data, int classes, int hidden, std::uint64_t seed,
                        int epochs = 8) {
  const int dim = data.images.dim(1);
  ModelSpec spec = make_dense_spec(Family::kPlainFeedforward, 1, dim, {hidden}, classes, seed);
  Model m = Model::init(spec, "tiny" + std::to_string(seed));
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = seed;
  return train(m, data, data, cfg).model;
}

// Linearly separable two-class blobs in the plane.
inline Examples make_blobs(int per_class, double gap, std::uint64_t seed) {
  Rng rng(seed);
  Examples ex;
  ex.images = Tensor::zeros({2 * per_class, 2});
  ex.labels.resize(2 * per_class);
  for (int i = 0; i < 2 * per_class; ++i) {
    const int cls = i % 2;
    const double cx = cls == 0 ? -gap : gap;
    ex.images.at(i, 0) = cx + rng.normal() * 0.3;
    ex.images.at(i, 1) = rng.normal() * 0.3;
    ex.labels[i] = cls;
  }
  return ex;
}

}  // namespace translab::testing
