#pragma once

#include <cstdint>
#include <vector>

#include "translab/model.hpp"
#include "translab/tensor.hpp"

namespace translab {

struct Examples {
  Tensor images;  // (count, features)
  std::vector<int> labels;

  int count() const { return images.shape.empty() ? 0 : images.dim(0); }
  Examples subset(const std::vector<int>& indices) const;
};

struct TrainConfig {
  enum class Opt { kSgd, kAdam };

  Opt optimizer = Opt::kSgd;
  double lr = 1e-2;
  double momentum = 0.9;       // sgd only
  double weight_decay = 5e-4;  // sgd only
  int epochs = 0;
  std::vector<double> milestones = {0.6, 0.8};  // fractions of total epochs
  double decay_factor = 10.0;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// Learning rate at a 1-based epoch index: the base rate divided by
// decay_factor once per milestone already passed. With defaults and 100
// epochs this is 1e-2 for epochs 1..60, 1e-3 for 61..80, 1e-4 after.
double lr_for_epoch(const TrainConfig& cfg, int epoch);

struct TrainResult {
  Model model;  // snapshot with the best validation accuracy (earliest on ties)
  int best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::vector<double> lr_trace;
  std::vector<double> val_accuracy_trace;
};

// Epochs over seeded shuffles of the training set; the validation set is
// scored after every epoch. Bit-reproducible for a fixed (model, cfg, data).
// Throws DataError on empty datasets and NumericError (with the epoch index)
// when the loss goes non-finite.
TrainResult train(const Model& initial, const Examples& train_set, const Examples& val_set,
                  const TrainConfig& cfg);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::uint8_t> correct;
};

// Accuracy plus the per-image correctness mask. The whole set is treated as
// one minibatch for input-quantization range purposes.
EvalResult evaluate(const Model& m, const Examples& data);

}  // namespace translab
