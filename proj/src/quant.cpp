#include "translab/quant.hpp"

#include <algorithm>
#include <cmath>

#include "translab/errors.hpp"
#include "translab/model.hpp"

namespace translab {

void QuantConfig::validate() const {
  if (bits == kFpSentinel) return;
  if (bits < 1) throw ConfigError("quantization bit width must be >= 1 (or 0 for FP)");
  if (kind == Kind::kInput && bits > kMaxInputBits)
    throw ConfigError("input quantization bit width must be in [1, 8]");
}

std::string to_string(QuantConfig::Kind kind) {
  switch (kind) {
    case QuantConfig::Kind::kInput: return "input";
    case QuantConfig::Kind::kWeight: return "weight";
    case QuantConfig::Kind::kActivation: return "activation";
  }
  return "?";
}

QuantConfig::Kind quant_kind_from_string(const std::string& s) {
  if (s == "input") return QuantConfig::Kind::kInput;
  if (s == "weight") return QuantConfig::Kind::kWeight;
  if (s == "activation") return QuantConfig::Kind::kActivation;
  throw ConfigError("unknown quantization kind: " + s);
}

double quantize_value(double v, int bits, double i_min, double i_max) {
  const double levels = std::ldexp(1.0, bits);  // 2^n, bits < 32 always here
  const double b = (i_max - i_min) / levels;
  double bin = std::floor((v - i_min) / b);
  if (bin > levels - 1.0) bin = levels - 1.0;  // clamp the I == i_max edge
  if (bin < 0.0) bin = 0.0;
  return bin * b + 0.5 * b + i_min;
}

Tensor quantize_with_range(const Tensor& t, int bits, double i_min, double i_max) {
  if (bits == QuantConfig::kFpSentinel || bits >= QuantConfig::kFpThresholdBits) return t;
  if (!(i_min < i_max)) throw NumericError("quantization range is degenerate (i_min >= i_max)");
  Tensor out = t;
  for (double& v : out.values) v = quantize_value(v, bits, i_min, i_max);
  return out;
}

Tensor quantize_input(const Tensor& minibatch, int bits) {
  if (bits == QuantConfig::kFpSentinel) return minibatch;
  QuantConfig cfg{QuantConfig::Kind::kInput, bits};
  cfg.validate();
  if (minibatch.values.empty()) throw NumericError("cannot quantize an empty minibatch");
  auto [lo, hi] = std::minmax_element(minibatch.values.begin(), minibatch.values.end());
  if (*lo == *hi)
    throw NumericError("constant minibatch: quantization range is degenerate");
  return quantize_with_range(minibatch, bits, *lo, *hi);
}

Tensor quantize_symmetric(const Tensor& t, int bits) {
  if (bits == QuantConfig::kFpSentinel || bits >= QuantConfig::kFpThresholdBits) return t;
  double amax = 0.0;
  for (double v : t.values) amax = std::max(amax, std::fabs(v));
  if (amax == 0.0) return t;  // scale undefined, pass through
  return quantize_with_range(t, bits, -amax, amax);
}

Model quantize_params(const Model& model, QuantConfig::Kind kind, int bits) {
  QuantConfig cfg{kind, bits};
  cfg.validate();
  Model out = model;
  out.quant = cfg;
  if (kind == QuantConfig::Kind::kWeight && !cfg.is_fp()) {
    // Materialize the quantized weights; biases stay full precision. The
    // attached config is cleared so forward does not quantize twice.
    for (std::size_t p = 0; p < out.params.size(); p += 2)
      out.params[p] = quantize_symmetric(out.params[p], bits);
    out.quant.reset();
  }
  return out;
}

}  // namespace translab
