#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "translab/quant.hpp"
#include "translab/tensor.hpp"

namespace translab {

enum class LayerKind { kDense, kConv, kRelu };
enum class Family { kPlainFeedforward, kMicroResidual };

std::string to_string(LayerKind k);
std::string to_string(Family f);
LayerKind layer_kind_from_string(const std::string& s);
Family family_from_string(const std::string& s);

// kDense: fan_in/fan_out are flat feature counts.
// kConv: fan_in/fan_out are channel counts, stride 1, zero "same" padding,
//        odd square kernel.
// kRelu: no parameters, shape preserved.
struct LayerDesc {
  LayerKind kind = LayerKind::kDense;
  int fan_in = 0;
  int fan_out = 0;
  int kernel = 0;
};

struct ModelSpec {
  Family family = Family::kPlainFeedforward;
  int input_channels = 1;
  int input_height = 1;
  int input_width = 1;
  int class_count = 0;
  std::vector<LayerDesc> layers;
  std::uint64_t init_seed = 0;
};

// Dense stack: fan sizes input -> hidden... -> classes with ReLU between.
ModelSpec make_dense_spec(Family family, int input_h, int input_w, std::vector<int> hidden,
                          int classes, std::uint64_t init_seed);
// conv-conv-dense stack on a single input channel.
ModelSpec make_conv_spec(Family family, int input_h, int input_w, int channels, int kernel,
                         int classes, std::uint64_t init_seed);

struct ShapeCHW {
  int c = 0, h = 0, w = 0;
  int features() const { return c * h * w; }
  bool operator==(const ShapeCHW&) const = default;
};

// Execution plan compiled from a ModelSpec. Micro-residual models wrap an
// identity skip around each leftmost pair of consecutive shape-preserving
// parameterized layers; the saved input is added to the second layer's output
// before its ReLU.
struct PlanStep {
  enum class Op { kDense, kConv, kRelu, kSkipSave, kSkipAdd };
  Op op;
  int layer = -1;  // spec layer index (kDense/kConv/kRelu)
  int param = -1;  // ordinal of the parameterized layer
  int slot = -1;   // skip slot (kSkipSave/kSkipAdd)
};

struct Plan {
  std::vector<PlanStep> steps;
  ShapeCHW input_shape;
  std::vector<ShapeCHW> step_shape;  // activation shape after each step
  std::vector<int> slot_step;        // slot -> step index whose output was saved
  int param_count = 0;
};

// Validates the spec (fan agreement, class count >= 2, kernel constraints)
// and compiles it. Throws ConfigError.
Plan build_plan(const ModelSpec& spec);

struct Provenance {
  std::string optimizer = "none";
  std::uint64_t train_seed = 0;
  int epochs_trained = 0;
};

struct Model {
  std::string id;
  ModelSpec spec;
  std::vector<Tensor> params;  // weight, bias per parameterized layer
  std::optional<QuantConfig> quant;
  Provenance provenance;

  // Fan-in-scaled uniform init (He-style), seeded per spec.init_seed.
  static Model init(ModelSpec spec, std::string id = "");

  int input_features() const {
    return spec.input_channels * spec.input_height * spec.input_width;
  }
  // "layer<i>.weight" / "layer<i>.bias" with i the spec layer index.
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
  void check_invariants() const;  // parameter shapes match spec
};

// Activations recorded during forward for the backward pass. Each caller owns
// its trace, so concurrent forward/input_gradient calls on one model are safe.
struct ForwardTrace {
  Tensor input;                     // batch after input quantization
  std::vector<Tensor> step_out;     // per plan step
  std::vector<Tensor> used_params;  // parameters as consumed (quantized view when active)
  Plan plan;
};

// Logits, shape (batch, classes). Deterministic for fixed model and batch.
// Throws std::invalid_argument on batch shape mismatch.
Tensor forward(const Model& m, const Tensor& batch);
Tensor forward_traced(const Model& m, const Tensor& batch, ForwardTrace& trace);

struct ParamGrads {
  std::vector<Tensor> g;  // same layout as Model::params
};

// Reverse pass from dlogits. Fills param_grads when non-null; returns the
// gradient with respect to the (pre-quantization) input batch when
// want_input_grad. Quantizers backpropagate straight-through.
Tensor backward(const Model& m, const ForwardTrace& trace, const Tensor& dlogits,
                ParamGrads* param_grads, bool want_input_grad);

// Gradient of the per-example cross-entropy loss with respect to the input,
// one row per image (no batch-mean scaling). Throws NumericError naming the
// first offending layer when the loss is non-finite.
Tensor input_gradient(const Model& m, const Tensor& batch, const std::vector<int>& labels);

// Per-logit input gradients: d(logit[label_sel[n]]) / d(input row n).
Tensor logit_input_gradient(const Model& m, const ForwardTrace& trace,
                            const std::vector<int>& logit_index);

// Mean (or summed) softmax cross-entropy; fills dlogits when non-null.
double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tensor* dlogits, bool mean_reduction);

std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace translab
