#include "translab/model.hpp"

#include <cmath>
#include <stdexcept>

#include "translab/errors.hpp"
#include "translab/rng.hpp"

namespace translab {

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv: return "conv";
    case LayerKind::kRelu: return "relu";
  }
  return "?";
}

std::string to_string(Family f) {
  return f == Family::kPlainFeedforward ? "plain_feedforward" : "micro_residual";
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "dense") return LayerKind::kDense;
  if (s == "conv") return LayerKind::kConv;
  if (s == "relu") return LayerKind::kRelu;
  throw ConfigError("unknown layer kind: " + s);
}

Family family_from_string(const std::string& s) {
  if (s == "plain_feedforward") return Family::kPlainFeedforward;
  if (s == "micro_residual") return Family::kMicroResidual;
  throw ConfigError("unknown model family: " + s);
}

ModelSpec make_dense_spec(Family family, int input_h, int input_w, std::vector<int> hidden,
                          int classes, std::uint64_t init_seed) {
  ModelSpec spec;
  spec.family = family;
  spec.input_channels = 1;
  spec.input_height = input_h;
  spec.input_width = input_w;
  spec.class_count = classes;
  spec.init_seed = init_seed;
  int in = input_h * input_w;
  for (int h : hidden) {
    spec.layers.push_back({LayerKind::kDense, in, h, 0});
    spec.layers.push_back({LayerKind::kRelu, 0, 0, 0});
    in = h;
  }
  spec.layers.push_back({LayerKind::kDense, in, classes, 0});
  return spec;
}

ModelSpec make_conv_spec(Family family, int input_h, int input_w, int channels, int kernel,
                         int classes, std::uint64_t init_seed) {
  ModelSpec spec;
  spec.family = family;
  spec.input_channels = 1;
  spec.input_height = input_h;
  spec.input_width = input_w;
  spec.class_count = classes;
  spec.init_seed = init_seed;
  spec.layers.push_back({LayerKind::kConv, 1, channels, kernel});
  spec.layers.push_back({LayerKind::kRelu, 0, 0, 0});
  spec.layers.push_back({LayerKind::kConv, channels, channels, kernel});
  spec.layers.push_back({LayerKind::kRelu, 0, 0, 0});
  spec.layers.push_back({LayerKind::kConv, channels, channels, kernel});
  spec.layers.push_back({LayerKind::kRelu, 0, 0, 0});
  spec.layers.push_back({LayerKind::kDense, channels * input_h * input_w, classes, 0});
  return spec;
}

static bool is_parameterized(LayerKind k) {
  return k == LayerKind::kDense || k == LayerKind::kConv;
}

Plan build_plan(const ModelSpec& spec) {
  if (spec.class_count < 2) throw ConfigError("model class count must be >= 2");
  if (spec.input_channels < 1 || spec.input_height < 1 || spec.input_width < 1)
    throw ConfigError("model input dimensions must be positive");
  if (spec.layers.empty()) throw ConfigError("model needs at least one layer");

  const int n = static_cast<int>(spec.layers.size());
  std::vector<ShapeCHW> in_shape(n), out_shape(n);
  ShapeCHW cur{spec.input_channels, spec.input_height, spec.input_width};
  for (int i = 0; i < n; ++i) {
    const LayerDesc& l = spec.layers[i];
    in_shape[i] = cur;
    switch (l.kind) {
      case LayerKind::kDense:
        if (l.fan_in != cur.features())
          throw ConfigError("layer " + std::to_string(i) + ": dense fan-in " +
                            std::to_string(l.fan_in) + " does not match incoming features " +
                            std::to_string(cur.features()));
        if (l.fan_out < 1) throw ConfigError("layer " + std::to_string(i) + ": dense fan-out must be positive");
        cur = {l.fan_out, 1, 1};
        break;
      case LayerKind::kConv:
        if (l.kernel < 1 || l.kernel % 2 == 0)
          throw ConfigError("layer " + std::to_string(i) + ": conv kernel must be odd and positive");
        if (l.fan_in != cur.c)
          throw ConfigError("layer " + std::to_string(i) + ": conv fan-in channels " +
                            std::to_string(l.fan_in) + " do not match incoming channels " +
                            std::to_string(cur.c));
        if (l.fan_out < 1) throw ConfigError("layer " + std::to_string(i) + ": conv fan-out must be positive");
        cur = {l.fan_out, cur.h, cur.w};
        break;
      case LayerKind::kRelu:
        break;
    }
    out_shape[i] = cur;
  }
  if (cur.features() != spec.class_count)
    throw ConfigError("final layer produces " + std::to_string(cur.features()) +
                      " features, expected class count " + std::to_string(spec.class_count));

  // Leftmost non-overlapping pairs of consecutive parameterized layers whose
  // block output shape equals the block input shape get an identity skip.
  std::vector<int> plist;
  for (int i = 0; i < n; ++i)
    if (is_parameterized(spec.layers[i].kind)) plist.push_back(i);
  std::vector<int> pair_begin(n, -1), pair_end(n, -1);
  int num_pairs = 0;
  if (spec.family == Family::kMicroResidual) {
    std::size_t i = 0;
    while (i + 1 < plist.size()) {
      int a = plist[i], b = plist[i + 1];
      if (in_shape[a] == out_shape[b]) {
        pair_begin[a] = num_pairs;
        pair_end[b] = num_pairs;
        ++num_pairs;
        i += 2;
      } else {
        ++i;
      }
    }
  }

  Plan plan;
  plan.input_shape = {spec.input_channels, spec.input_height, spec.input_width};
  plan.slot_step.assign(num_pairs, -1);
  int param_ord = 0;
  for (int i = 0; i < n; ++i) {
    const LayerDesc& l = spec.layers[i];
    if (pair_begin[i] >= 0) {
      plan.slot_step[pair_begin[i]] = static_cast<int>(plan.steps.size());
      plan.steps.push_back({PlanStep::Op::kSkipSave, -1, -1, pair_begin[i]});
      plan.step_shape.push_back(in_shape[i]);
    }
    PlanStep step;
    step.layer = i;
    switch (l.kind) {
      case LayerKind::kDense:
        step.op = PlanStep::Op::kDense;
        step.param = param_ord++;
        break;
      case LayerKind::kConv:
        step.op = PlanStep::Op::kConv;
        step.param = param_ord++;
        break;
      case LayerKind::kRelu:
        step.op = PlanStep::Op::kRelu;
        break;
    }
    plan.steps.push_back(step);
    plan.step_shape.push_back(out_shape[i]);
    if (pair_end[i] >= 0) {
      plan.steps.push_back({PlanStep::Op::kSkipAdd, -1, -1, pair_end[i]});
      plan.step_shape.push_back(out_shape[i]);
    }
  }
  plan.param_count = param_ord;
  return plan;
}

Model Model::init(ModelSpec spec, std::string id) {
  Plan plan = build_plan(spec);
  Model m;
  m.id = std::move(id);
  m.spec = std::move(spec);
  int param_ord = 0;
  for (const LayerDesc& l : m.spec.layers) {
    if (!is_parameterized(l.kind)) continue;
    int fan_in = l.kind == LayerKind::kDense ? l.fan_in : l.fan_in * l.kernel * l.kernel;
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    Rng rng = Rng::keyed(m.spec.init_seed, static_cast<std::uint64_t>(param_ord));
    Tensor w = l.kind == LayerKind::kDense
                   ? Tensor::zeros({l.fan_out, l.fan_in})
                   : Tensor::zeros({l.fan_out, l.fan_in, l.kernel, l.kernel});
    for (double& v : w.values) v = rng.uniform(-limit, limit);
    m.params.push_back(std::move(w));
    m.params.push_back(Tensor::zeros({l.fan_out}));
    ++param_ord;
  }
  (void)plan;
  return m;
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_params() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  int param_ord = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (!is_parameterized(spec.layers[i].kind)) continue;
    out.emplace_back("layer" + std::to_string(i) + ".weight", &params[2 * param_ord]);
    out.emplace_back("layer" + std::to_string(i) + ".bias", &params[2 * param_ord + 1]);
    ++param_ord;
  }
  return out;
}

void Model::check_invariants() const {
  Plan plan = build_plan(spec);
  if (static_cast<int>(params.size()) != 2 * plan.param_count)
    throw std::invalid_argument("model parameter count does not match spec");
  int param_ord = 0;
  for (const LayerDesc& l : spec.layers) {
    if (!is_parameterized(l.kind)) continue;
    const Tensor& w = params[2 * param_ord];
    const Tensor& b = params[2 * param_ord + 1];
    std::vector<int> want = l.kind == LayerKind::kDense
                                ? std::vector<int>{l.fan_out, l.fan_in}
                                : std::vector<int>{l.fan_out, l.fan_in, l.kernel, l.kernel};
    if (w.shape != want || b.shape != std::vector<int>{l.fan_out})
      throw std::invalid_argument("model parameter shapes do not match spec");
    ++param_ord;
  }
  if (quant) quant->validate();
}

namespace {

Tensor dense_fwd(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor y = Tensor::zeros({n, out});
  for (int r = 0; r < n; ++r) {
    const double* xr = row_ptr(x, r);
    double* yr = row_ptr(y, r);
    for (int o = 0; o < out; ++o) {
      const double* wrow = w.values.data() + static_cast<std::size_t>(o) * in;
      double acc = b[o];
      for (int i = 0; i < in; ++i) acc += wrow[i] * xr[i];
      yr[o] = acc;
    }
  }
  return y;
}

void dense_bwd(const Tensor& x, const Tensor& gout, const Tensor& w, Tensor* dw, Tensor* db,
               Tensor* dx) {
  const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  for (int r = 0; r < n; ++r) {
    const double* xr = row_ptr(x, r);
    const double* gr = row_ptr(gout, r);
    if (dx) {
      double* dxr = row_ptr(*dx, r);
      for (int o = 0; o < out; ++o) {
        const double* wrow = w.values.data() + static_cast<std::size_t>(o) * in;
        const double g = gr[o];
        for (int i = 0; i < in; ++i) dxr[i] += g * wrow[i];
      }
    }
    if (dw) {
      for (int o = 0; o < out; ++o) {
        double* dwrow = dw->values.data() + static_cast<std::size_t>(o) * in;
        const double g = gr[o];
        for (int i = 0; i < in; ++i) dwrow[i] += g * xr[i];
      }
    }
    if (db) {
      for (int o = 0; o < out; ++o) db->values[o] += gr[o];
    }
  }
}

// Stride-1 "same" zero-padded convolution on row-major (N, C*H*W) batches.
Tensor conv_fwd(const Tensor& x, ShapeCHW in, const Tensor& w, const Tensor& b) {
  const int n = x.dim(0), ci = in.c, h = in.h, wd = in.w;
  const int co = w.dim(0), k = w.dim(2), pad = k / 2;
  Tensor y = Tensor::zeros({n, co * h * wd});
  for (int r = 0; r < n; ++r) {
    const double* xr = row_ptr(x, r);
    double* yr = row_ptr(y, r);
    for (int oc = 0; oc < co; ++oc) {
      const double bias = b[oc];
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < wd; ++j) {
          double acc = bias;
          for (int ic = 0; ic < ci; ++ic) {
            const double* xc = xr + static_cast<std::size_t>(ic) * h * wd;
            const double* wk = w.values.data() +
                               ((static_cast<std::size_t>(oc) * ci + ic) * k) * k;
            for (int u = 0; u < k; ++u) {
              const int ii = i + u - pad;
              if (ii < 0 || ii >= h) continue;
              for (int v = 0; v < k; ++v) {
                const int jj = j + v - pad;
                if (jj < 0 || jj >= wd) continue;
                acc += wk[u * k + v] * xc[ii * wd + jj];
              }
            }
          }
          yr[(static_cast<std::size_t>(oc) * h + i) * wd + j] = acc;
        }
      }
    }
  }
  return y;
}

void conv_bwd(const Tensor& x, ShapeCHW in, const Tensor& gout, const Tensor& w, Tensor* dw,
              Tensor* db, Tensor* dx) {
  const int n = x.dim(0), ci = in.c, h = in.h, wd = in.w;
  const int co = w.dim(0), k = w.dim(2), pad = k / 2;
  for (int r = 0; r < n; ++r) {
    const double* xr = row_ptr(x, r);
    const double* gr = row_ptr(gout, r);
    double* dxr = dx ? row_ptr(*dx, r) : nullptr;
    for (int oc = 0; oc < co; ++oc) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < wd; ++j) {
          const double g = gr[(static_cast<std::size_t>(oc) * h + i) * wd + j];
          if (g == 0.0) continue;
          if (db) db->values[oc] += g;
          for (int ic = 0; ic < ci; ++ic) {
            const double* xc = xr + static_cast<std::size_t>(ic) * h * wd;
            const std::size_t wbase = ((static_cast<std::size_t>(oc) * ci + ic) * k) * k;
            for (int u = 0; u < k; ++u) {
              const int ii = i + u - pad;
              if (ii < 0 || ii >= h) continue;
              for (int v = 0; v < k; ++v) {
                const int jj = j + v - pad;
                if (jj < 0 || jj >= wd) continue;
                if (dw) dw->values[wbase + u * k + v] += g * xc[ii * wd + jj];
                if (dxr) dxr[static_cast<std::size_t>(ic) * h * wd + ii * wd + jj] +=
                    g * w.values[wbase + u * k + v];
              }
            }
          }
        }
      }
    }
  }
}

void accumulate(Tensor& dst, const Tensor& src) {
  if (dst.values.empty()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.values.size(); ++i) dst.values[i] += src.values[i];
}

const Tensor& used_param(const Model& m, const ForwardTrace& tr, int idx) {
  return tr.used_params.empty() ? m.params[idx] : tr.used_params[idx];
}

}  // namespace

Tensor forward_traced(const Model& m, const Tensor& batch, ForwardTrace& trace) {
  if (batch.rank() != 2 || batch.dim(1) != m.input_features())
    throw std::invalid_argument("batch shape " + shape_str(batch.shape) +
                                " does not match model input features " +
                                std::to_string(m.input_features()));
  trace.plan = build_plan(m.spec);
  const QuantConfig* q = m.quant ? &*m.quant : nullptr;

  if (q && q->kind == QuantConfig::Kind::kInput && !q->is_fp())
    trace.input = quantize_input(batch, q->bits);
  else
    trace.input = batch;

  trace.used_params.clear();
  if (q && q->kind == QuantConfig::Kind::kWeight && !q->is_fp()) {
    trace.used_params = m.params;
    for (std::size_t p = 0; p < trace.used_params.size(); p += 2)
      trace.used_params[p] = quantize_symmetric(trace.used_params[p], q->bits);
  }
  const bool act_quant = q && q->kind == QuantConfig::Kind::kActivation && !q->is_fp();

  const Plan& plan = trace.plan;
  trace.step_out.clear();
  trace.step_out.reserve(plan.steps.size());
  const Tensor* cur = &trace.input;
  for (std::size_t k = 0; k < plan.steps.size(); ++k) {
    const PlanStep& step = plan.steps[k];
    const ShapeCHW in_shape = k == 0 ? plan.input_shape : plan.step_shape[k - 1];
    Tensor out;
    switch (step.op) {
      case PlanStep::Op::kDense:
        out = dense_fwd(*cur, used_param(m, trace, 2 * step.param),
                        used_param(m, trace, 2 * step.param + 1));
        if (act_quant) out = quantize_symmetric(out, q->bits);
        break;
      case PlanStep::Op::kConv:
        out = conv_fwd(*cur, in_shape, used_param(m, trace, 2 * step.param),
                       used_param(m, trace, 2 * step.param + 1));
        if (act_quant) out = quantize_symmetric(out, q->bits);
        break;
      case PlanStep::Op::kRelu:
        out = *cur;
        for (double& v : out.values)
          if (v < 0.0) v = 0.0;
        break;
      case PlanStep::Op::kSkipSave:
        out = *cur;
        break;
      case PlanStep::Op::kSkipAdd: {
        out = *cur;
        const Tensor& saved = trace.step_out[plan.slot_step[step.slot]];
        for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += saved.values[i];
        break;
      }
    }
    trace.step_out.push_back(std::move(out));
    cur = &trace.step_out.back();
  }
  return trace.step_out.back();
}

Tensor forward(const Model& m, const Tensor& batch) {
  ForwardTrace trace;
  return forward_traced(m, batch, trace);
}

Tensor backward(const Model& m, const ForwardTrace& trace, const Tensor& dlogits,
                ParamGrads* param_grads, bool want_input_grad) {
  const Plan& plan = trace.plan;
  const int steps = static_cast<int>(plan.steps.size());
  if (param_grads && param_grads->g.empty()) {
    param_grads->g.reserve(m.params.size());
    for (const Tensor& p : m.params) param_grads->g.push_back(Tensor::zeros(p.shape));
  }

  std::vector<Tensor> grads(steps);
  grads[steps - 1] = dlogits;
  Tensor dinput;
  for (int k = steps - 1; k >= 0; --k) {
    const PlanStep& step = plan.steps[k];
    const Tensor& gout = grads[k];
    const Tensor& ain = k == 0 ? trace.input : trace.step_out[k - 1];
    const ShapeCHW in_shape = k == 0 ? plan.input_shape : plan.step_shape[k - 1];
    const bool need_gin = k > 0 || want_input_grad;
    Tensor gin;
    switch (step.op) {
      case PlanStep::Op::kDense: {
        if (need_gin) gin = Tensor::zeros(ain.shape);
        Tensor* dw = param_grads ? &param_grads->g[2 * step.param] : nullptr;
        Tensor* db = param_grads ? &param_grads->g[2 * step.param + 1] : nullptr;
        dense_bwd(ain, gout, used_param(m, trace, 2 * step.param), dw, db,
                  need_gin ? &gin : nullptr);
        break;
      }
      case PlanStep::Op::kConv: {
        if (need_gin) gin = Tensor::zeros(ain.shape);
        Tensor* dw = param_grads ? &param_grads->g[2 * step.param] : nullptr;
        Tensor* db = param_grads ? &param_grads->g[2 * step.param + 1] : nullptr;
        conv_bwd(ain, in_shape, gout, used_param(m, trace, 2 * step.param), dw, db,
                 need_gin ? &gin : nullptr);
        break;
      }
      case PlanStep::Op::kRelu:
        if (need_gin) {
          gin = gout;
          for (std::size_t i = 0; i < gin.values.size(); ++i)
            if (ain.values[i] <= 0.0) gin.values[i] = 0.0;
        }
        break;
      case PlanStep::Op::kSkipSave:
        if (need_gin) gin = gout;
        break;
      case PlanStep::Op::kSkipAdd:
        if (need_gin) gin = gout;
        accumulate(grads[plan.slot_step[step.slot]], gout);
        break;
    }
    if (!need_gin) continue;
    if (k > 0)
      accumulate(grads[k - 1], gin);
    else
      accumulate(dinput, gin);
  }
  // Straight-through: the input quantizer backward is identity, so dinput is
  // already the gradient with respect to the raw batch.
  return want_input_grad ? dinput : Tensor();
}

Tensor input_gradient(const Model& m, const Tensor& batch, const std::vector<int>& labels) {
  if (static_cast<int>(labels.size()) != batch.dim(0))
    throw std::invalid_argument("labels size does not match batch");
  for (int y : labels)
    if (y < 0 || y >= m.spec.class_count)
      throw std::invalid_argument("label out of range: " + std::to_string(y));

  ForwardTrace trace;
  Tensor logits = forward_traced(m, batch, trace);
  Tensor dlogits;
  double loss = softmax_cross_entropy(logits, labels, &dlogits, /*mean_reduction=*/false);
  if (!std::isfinite(loss)) {
    for (std::size_t k = 0; k < trace.step_out.size(); ++k) {
      if (!trace.step_out[k].all_finite()) {
        const PlanStep& s = trace.plan.steps[k];
        throw NumericError("non-finite loss; first non-finite activation at plan step " +
                           std::to_string(k) + " (spec layer " + std::to_string(s.layer) + ")");
      }
    }
    throw NumericError("non-finite loss with finite activations (overflow in loss reduction)");
  }
  return backward(m, trace, dlogits, nullptr, /*want_input_grad=*/true);
}

Tensor logit_input_gradient(const Model& m, const ForwardTrace& trace,
                            const std::vector<int>& logit_index) {
  const Tensor& logits = trace.step_out.back();
  Tensor dlogits = Tensor::zeros(logits.shape);
  for (int r = 0; r < logits.dim(0); ++r) dlogits.at(r, logit_index[r]) = 1.0;
  return backward(m, trace, dlogits, nullptr, /*want_input_grad=*/true);
}

double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tensor* dlogits, bool mean_reduction) {
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("labels size does not match logits rows");
  if (dlogits) *dlogits = Tensor::zeros(logits.shape);
  const double scale = mean_reduction ? 1.0 / static_cast<double>(n) : 1.0;
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    const double* z = row_ptr(logits, r);
    double zmax = z[0];
    for (int j = 1; j < c; ++j) zmax = std::max(zmax, z[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(z[j] - zmax);
    const double lse = zmax + std::log(sum);
    total += (lse - z[labels[r]]) * scale;
    if (dlogits) {
      double* d = row_ptr(*dlogits, r);
      for (int j = 0; j < c; ++j) d[j] = std::exp(z[j] - lse) * scale;
      d[labels[r]] -= scale;
    }
  }
  return total;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const int n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (int r = 0; r < n; ++r) {
    const double* z = row_ptr(logits, r);
    int best = 0;
    for (int j = 1; j < c; ++j)
      if (z[j] > z[best]) best = j;
    out[r] = best;
  }
  return out;
}

}  // namespace translab
