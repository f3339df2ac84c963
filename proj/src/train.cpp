#include "translab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "translab/errors.hpp"
#include "translab/rng.hpp"

namespace translab {

Examples Examples::subset(const std::vector<int>& indices) const {
  Examples out;
  const int f = images.dim(1);
  out.images = Tensor::zeros({static_cast<int>(indices.size()), f});
  out.labels.resize(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const double* src = row_ptr(images, indices[r]);
    std::copy(src, src + f, row_ptr(out.images, static_cast<int>(r)));
    out.labels[r] = labels[indices[r]];
  }
  return out;
}

void TrainConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("learning rate must be positive");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (decay_factor <= 1.0) throw ConfigError("decay factor must be > 1");
  double prev = 0.0;
  for (double mfrac : milestones) {
    if (!(mfrac > 0.0 && mfrac < 1.0))
      throw ConfigError("milestone fractions must lie strictly in (0, 1)");
    if (mfrac <= prev) throw ConfigError("milestone fractions must be strictly increasing");
    prev = mfrac;
  }
}

double lr_for_epoch(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (double mfrac : cfg.milestones) {
    const int boundary = static_cast<int>(std::floor(mfrac * cfg.epochs));
    if (epoch > boundary) lr /= cfg.decay_factor;
  }
  return lr;
}

namespace {

struct SgdState {
  std::vector<Tensor> velocity;
};

struct AdamState {
  std::vector<Tensor> m, v;
  long step = 0;
};

void sgd_step(Model& model, const ParamGrads& grads, SgdState& st, const TrainConfig& cfg,
              double lr) {
  if (st.velocity.empty())
    for (const Tensor& p : model.params) st.velocity.push_back(Tensor::zeros(p.shape));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    Tensor& p = model.params[i];
    Tensor& v = st.velocity[i];
    const Tensor& g = grads.g[i];
    for (std::size_t j = 0; j < p.values.size(); ++j) {
      const double d = g.values[j] + cfg.weight_decay * p.values[j];
      v.values[j] = cfg.momentum * v.values[j] + d;
      p.values[j] -= lr * v.values[j];
    }
  }
}

void adam_step(Model& model, const ParamGrads& grads, AdamState& st, double lr) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  if (st.m.empty()) {
    for (const Tensor& p : model.params) {
      st.m.push_back(Tensor::zeros(p.shape));
      st.v.push_back(Tensor::zeros(p.shape));
    }
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    Tensor& p = model.params[i];
    const Tensor& g = grads.g[i];
    for (std::size_t j = 0; j < p.values.size(); ++j) {
      st.m[i].values[j] = kBeta1 * st.m[i].values[j] + (1.0 - kBeta1) * g.values[j];
      st.v[i].values[j] = kBeta2 * st.v[i].values[j] + (1.0 - kBeta2) * g.values[j] * g.values[j];
      const double mhat = st.m[i].values[j] / bc1;
      const double vhat = st.v[i].values[j] / bc2;
      p.values[j] -= lr * mhat / (std::sqrt(vhat) + kEps);
    }
  }
}

Examples gather_batch(const Examples& data, const std::vector<int>& order, int begin, int end) {
  std::vector<int> idx(order.begin() + begin, order.begin() + end);
  return data.subset(idx);
}

}  // namespace

TrainResult train(const Model& initial, const Examples& train_set, const Examples& val_set,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.count() == 0) throw DataError("training set is empty");
  if (val_set.count() == 0) throw DataError("validation set is empty");

  TrainResult result;
  result.model = initial;
  result.model.provenance.optimizer = cfg.optimizer == TrainConfig::Opt::kSgd ? "sgd" : "adam";
  result.model.provenance.train_seed = cfg.seed;
  result.model.provenance.epochs_trained = 0;
  if (cfg.epochs == 0) return result;

  Model current = result.model;
  SgdState sgd;
  AdamState adam;
  double best_acc = -1.0;
  int best_epoch = 0;
  Model best = current;

  std::vector<int> order(train_set.count());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_for_epoch(cfg, epoch);
    result.lr_trace.push_back(lr);
    Rng shuffle_rng = Rng::keyed(cfg.seed, static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    for (int begin = 0; begin < train_set.count(); begin += cfg.batch_size) {
      const int end = std::min(begin + cfg.batch_size, train_set.count());
      Examples batch = gather_batch(train_set, order, begin, end);

      ForwardTrace trace;
      Tensor logits = forward_traced(current, batch.images, trace);
      Tensor dlogits;
      const double loss =
          softmax_cross_entropy(logits, batch.labels, &dlogits, /*mean_reduction=*/true);
      if (!std::isfinite(loss))
        throw NumericError("training loss is non-finite at epoch " + std::to_string(epoch));

      ParamGrads grads;
      backward(current, trace, dlogits, &grads, /*want_input_grad=*/false);
      if (cfg.optimizer == TrainConfig::Opt::kSgd)
        sgd_step(current, grads, sgd, cfg, lr);
      else
        adam_step(current, grads, adam, lr);
    }

    current.provenance.epochs_trained = epoch;
    const double val_acc = evaluate(current, val_set).accuracy;
    result.val_accuracy_trace.push_back(val_acc);
    if (val_acc > best_acc) {  // strict: earliest epoch wins ties
      best_acc = val_acc;
      best_epoch = epoch;
      best = current;
    }
  }

  result.model = std::move(best);
  result.best_epoch = best_epoch;
  result.best_val_accuracy = best_acc;
  return result;
}

EvalResult evaluate(const Model& m, const Examples& data) {
  if (data.count() == 0) throw DataError("cannot evaluate on an empty dataset");
  Tensor logits = forward(m, data.images);
  std::vector<int> pred = argmax_rows(logits);
  EvalResult res;
  res.correct.resize(pred.size());
  int hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    res.correct[i] = pred[i] == data.labels[i] ? 1 : 0;
    hits += res.correct[i];
  }
  res.accuracy = static_cast<double>(hits) / static_cast<double>(pred.size());
  return res;
}

}  // namespace translab
