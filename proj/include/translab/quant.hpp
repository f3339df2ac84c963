#pragma once

#include <optional>
#include <string>

#include "translab/tensor.hpp"

namespace translab {

struct Model;

// Uniform midrise quantization. One rule covers input, weight and activation
// quantization; only the range convention differs (minibatch min/max for
// inputs, symmetric around zero per tensor for weights and activations).
// Backward is always straight-through: the quantizer is treated as identity,
// so gradient attacks stay applicable on piecewise-constant forwards.
struct QuantConfig {
  enum class Kind { kInput, kWeight, kActivation };

  // bits == kFpSentinel means full precision pass-through; widths >= 32 are
  // treated the same (a 2^32 grid on doubles is indistinguishable from FP).
  static constexpr int kFpSentinel = 0;
  static constexpr int kMaxInputBits = 8;
  static constexpr int kFpThresholdBits = 32;

  Kind kind = Kind::kInput;
  int bits = kFpSentinel;

  bool is_fp() const { return bits == kFpSentinel || bits >= kFpThresholdBits; }

  // Throws ConfigError on out-of-range bit widths.
  void validate() const;
};

std::string to_string(QuantConfig::Kind kind);
QuantConfig::Kind quant_kind_from_string(const std::string& s);

// Midrise grid over a fixed range: values land on i_min + b/2 + k*b with
// b = (i_max - i_min) / 2^n and k in {0, ..., 2^n - 1}. The bin index at
// I == i_max would be 2^n (one past the grid); it is clamped to 2^n - 1.
double quantize_value(double v, int bits, double i_min, double i_max);
Tensor quantize_with_range(const Tensor& t, int bits, double i_min, double i_max);

// Range taken from the minibatch itself. Throws NumericError when the batch
// is constant (i_min == i_max leaves the grid undefined).
Tensor quantize_input(const Tensor& minibatch, int bits);

// Symmetric per-tensor rule used for weights and activations:
// i_min = -max|v|, i_max = +max|v|. All-zero tensors pass through unchanged.
Tensor quantize_symmetric(const Tensor& t, int bits);

// Post-hoc quantized view of a model: weight kind quantizes each weight
// matrix in place (biases stay full precision); activation kind only attaches
// the config so forward quantizes layer outputs on the fly.
Model quantize_params(const Model& model, QuantConfig::Kind kind, int bits);

// Straight-through estimator: gradient at the quantizer input equals the
// gradient at its output.
inline Tensor straight_through(const Tensor& upstream_grad) { return upstream_grad; }

}  // namespace translab
