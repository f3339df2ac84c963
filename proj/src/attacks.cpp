#include "translab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include "translab/errors.hpp"
#include "translab/rng.hpp"

namespace translab {

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::kPgd: return "pgd";
    case AttackKind::kCwL2: return "cw_l2";
    case AttackKind::kDeepFool: return "deepfool";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "pgd") return AttackKind::kPgd;
  if (s == "cw_l2") return AttackKind::kCwL2;
  if (s == "deepfool") return AttackKind::kDeepFool;
  throw ConfigError("unknown attack kind: " + s);
}

void AttackConfig::validate() const {
  if (epsilon < 0.0) throw ConfigError("attack epsilon must be >= 0");
  if (iterations < 1) throw ConfigError("attack iterations must be >= 1");
  if (kind == AttackKind::kPgd && step <= 0.0) throw ConfigError("pgd step size must be > 0");
  if (kappa < 0.0) throw ConfigError("cw kappa must be >= 0");
  if (!(clamp_lo < clamp_hi)) throw ConfigError("attack clamp range is empty");
}

AttackConfig pgd_reference() {
  AttackConfig cfg;
  cfg.kind = AttackKind::kPgd;
  cfg.epsilon = 8.0 / 255.0;
  cfg.step = 0.01;
  cfg.iterations = 40;
  return cfg;
}

AttackConfig cw_reference(double kappa) {
  AttackConfig cfg;
  cfg.kind = AttackKind::kCwL2;
  cfg.iterations = 100;
  cfg.kappa = kappa;
  return cfg;
}

AttackConfig deepfool_reference() {
  AttackConfig cfg;
  cfg.kind = AttackKind::kDeepFool;
  cfg.iterations = 50;
  cfg.overshoot = 0.02;
  return cfg;
}

void AdvBatch::check_invariants() const {
  const std::size_t n = static_cast<std::size_t>(count());
  if (labels.size() != n || attacked.size() != n || success.size() != n || failed.size() != n ||
      l2.size() != n || linf.size() != n || keys.size() != n)
    throw std::invalid_argument("adv batch mask/field lengths do not match batch size");
  if (!same_shape(clean, adv)) throw std::invalid_argument("clean/adv shapes differ");
  for (std::size_t i = 0; i < n; ++i)
    if (l2[i] < 0.0 || linf[i] < 0.0) throw std::invalid_argument("negative perturbation norm");
}

std::vector<int> predict(const Model& m, const Tensor& batch) {
  return argmax_rows(forward(m, batch));
}

namespace {

std::vector<std::uint64_t> default_keys(int n, const std::vector<std::uint64_t>* keys) {
  if (keys) {
    if (static_cast<int>(keys->size()) != n)
      throw std::invalid_argument("keys size does not match batch");
    return *keys;
  }
  std::vector<std::uint64_t> out(n);
  for (int i = 0; i < n; ++i) out[i] = static_cast<std::uint64_t>(i);
  return out;
}

AdvBatch make_result(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                     const std::vector<std::uint64_t>& keys) {
  AdvBatch out;
  out.clean = batch;
  out.adv = batch;
  out.labels = labels;
  out.keys = keys;
  const int n = batch.dim(0);
  out.attacked.assign(n, 0);
  out.success.assign(n, 0);
  out.failed.assign(n, 0);
  out.l2.assign(n, 0.0);
  out.linf.assign(n, 0.0);
  std::vector<int> pred = predict(m, batch);
  for (int i = 0; i < n; ++i) out.attacked[i] = pred[i] == labels[i] ? 1 : 0;
  return out;
}

void fill_norms(AdvBatch& out) {
  const int n = out.count(), d = out.clean.dim(1);
  for (int i = 0; i < n; ++i) {
    const double* c = row_ptr(out.clean, i);
    const double* a = row_ptr(out.adv, i);
    double sq = 0.0, mx = 0.0;
    for (int j = 0; j < d; ++j) {
      const double delta = a[j] - c[j];
      sq += delta * delta;
      mx = std::max(mx, std::fabs(delta));
    }
    out.l2[i] = std::sqrt(sq);
    out.linf[i] = mx;
  }
}

// Gathers rows i with mask[i] != 0.
Tensor gather_rows(const Tensor& t, const std::vector<int>& rows) {
  const int d = t.dim(1);
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), d});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(row_ptr(t, rows[r]), row_ptr(t, rows[r]) + d, row_ptr(out, static_cast<int>(r)));
  return out;
}

}  // namespace

AdvBatch pgd_attack(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                    const AttackConfig& cfg, const std::vector<std::uint64_t>* keys_in) {
  cfg.validate();
  const int n = batch.dim(0), d = batch.dim(1);
  std::vector<std::uint64_t> keys = default_keys(n, keys_in);
  AdvBatch out = make_result(m, batch, labels, keys);

  std::vector<int> rows;
  for (int i = 0; i < n; ++i)
    if (out.attacked[i]) rows.push_back(i);
  if (rows.empty()) return out;

  Tensor nat = gather_rows(batch, rows);
  std::vector<int> sub_labels(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) sub_labels[r] = labels[rows[r]];

  // Random start within the eps ball, keyed per image.
  Tensor x = nat;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    Rng rng = Rng::keyed(cfg.seed, keys[rows[r]]);
    double* xr = row_ptr(x, static_cast<int>(r));
    for (int j = 0; j < d; ++j)
      xr[j] = std::clamp(xr[j] + cfg.epsilon * rng.uniform(-1.0, 1.0), cfg.clamp_lo, cfg.clamp_hi);
  }

  for (int it = 0; it < cfg.iterations; ++it) {
    Tensor g = input_gradient(m, x, sub_labels);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      double* xr = row_ptr(x, static_cast<int>(r));
      const double* gr = row_ptr(g, static_cast<int>(r));
      const double* natr = row_ptr(nat, static_cast<int>(r));
      for (int j = 0; j < d; ++j) {
        double v = xr[j] + cfg.step * sign_of(gr[j]);
        // Project onto the eps ball around the natural image, then the range.
        v = std::clamp(v, natr[j] - cfg.epsilon, natr[j] + cfg.epsilon);
        xr[j] = std::clamp(v, cfg.clamp_lo, cfg.clamp_hi);
      }
    }
  }

  std::vector<int> adv_pred = predict(m, x);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int i = rows[r];
    std::copy(row_ptr(x, static_cast<int>(r)), row_ptr(x, static_cast<int>(r)) + d,
              row_ptr(out.adv, i));
    out.success[i] = adv_pred[r] != labels[i] ? 1 : 0;
  }
  fill_norms(out);
  return out;
}

namespace {

// Logit margin used by CW: best wrong logit minus true logit.
double cw_margin(const double* z, int classes, int label, int* best_wrong) {
  int bw = label == 0 ? 1 : 0;
  for (int j = 0; j < classes; ++j)
    if (j != label && z[j] > z[bw]) bw = j;
  if (best_wrong) *best_wrong = bw;
  return z[bw] - z[label];
}

}  // namespace

AdvBatch cw_l2_attack(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                      const AttackConfig& cfg, const std::vector<std::uint64_t>* keys_in) {
  cfg.validate();
  const int n = batch.dim(0), d = batch.dim(1);
  const int classes = m.spec.class_count;
  std::vector<std::uint64_t> keys = default_keys(n, keys_in);
  AdvBatch out = make_result(m, batch, labels, keys);

  std::vector<int> rows;
  for (int i = 0; i < n; ++i)
    if (out.attacked[i]) rows.push_back(i);
  if (rows.empty()) return out;
  const int cnt = static_cast<int>(rows.size());

  Tensor nat = gather_rows(batch, rows);
  std::vector<int> sub_labels(cnt);
  for (int r = 0; r < cnt; ++r) sub_labels[r] = labels[rows[r]];

  const double lo = cfg.clamp_lo, hi = cfg.clamp_hi;
  const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
  auto to_x = [&](double w) { return mid + half * std::tanh(w); };
  auto to_w = [&](double v) {
    double u = (v - mid) / half;
    u = std::clamp(u, -1.0 + 1e-9, 1.0 - 1e-9);
    return std::atanh(u);
  };

  constexpr int kBinarySearchSteps = 5;
  constexpr double kInitialConst = 1.0;
  constexpr double kLearningRate = 5e-2;

  Tensor w0 = Tensor::zeros({cnt, d});
  for (int r = 0; r < cnt; ++r)
    for (int j = 0; j < d; ++j) w0.at(r, j) = to_w(nat.at(r, j));

  std::vector<double> best_l2(cnt, std::numeric_limits<double>::infinity());
  Tensor best_adv = nat;
  std::vector<std::uint8_t> found(cnt, 0), diverged(cnt, 0);
  std::vector<double> c_cur(cnt, kInitialConst), c_lo(cnt, 0.0),
      c_hi(cnt, std::numeric_limits<double>::infinity());

  for (int bs = 0; bs < kBinarySearchSteps; ++bs) {
    Tensor w = w0;
    Tensor adam_m = Tensor::zeros({cnt, d}), adam_v = Tensor::zeros({cnt, d});
    std::vector<std::uint8_t> success_this(cnt, 0);
    for (int it = 1; it <= cfg.iterations; ++it) {
      // x' from w, then logits and margins.
      Tensor x = Tensor::zeros({cnt, d});
      for (std::size_t k = 0; k < x.values.size(); ++k) x.values[k] = to_x(w.values[k]);
      ForwardTrace trace;
      Tensor logits = forward_traced(m, x, trace);

      Tensor dlogits = Tensor::zeros({cnt, classes});
      std::vector<double> margins(cnt);
      for (int r = 0; r < cnt; ++r) {
        int bw = 0;
        margins[r] = cw_margin(row_ptr(logits, r), classes, sub_labels[r], &bw);
        if (margins[r] >= cfg.kappa) {
          success_this[r] = 1;
          double sq = 0.0;
          for (int j = 0; j < d; ++j) {
            const double delta = x.at(r, j) - nat.at(r, j);
            sq += delta * delta;
          }
          const double l2norm = std::sqrt(sq);
          if (l2norm < best_l2[r]) {
            best_l2[r] = l2norm;
            std::copy(row_ptr(x, r), row_ptr(x, r) + d, row_ptr(best_adv, r));
            found[r] = 1;
          }
        }
        // d(loss_margin)/d(logits) while the margin constraint is active.
        if (margins[r] < cfg.kappa) {
          dlogits.at(r, sub_labels[r]) = c_cur[r];
          dlogits.at(r, bw) = -c_cur[r];
        }
      }
      Tensor gx = backward(m, trace, dlogits, nullptr, /*want_input_grad=*/true);

      // Total gradient in w space: distance term plus margin term.
      bool any_nonfinite = false;
      for (int r = 0; r < cnt; ++r) {
        for (int j = 0; j < d; ++j) {
          const std::size_t k = static_cast<std::size_t>(r) * d + j;
          const double xv = x.values[k];
          const double dxdw = half * (1.0 - std::tanh(w.values[k]) * std::tanh(w.values[k]));
          double g = (2.0 * (xv - nat.values[k]) + gx.values[k]) * dxdw;
          if (!std::isfinite(g)) {
            any_nonfinite = true;
            g = 0.0;
            diverged[r] = 1;
          }
          // Adam update.
          adam_m.values[k] = 0.9 * adam_m.values[k] + 0.1 * g;
          adam_v.values[k] = 0.999 * adam_v.values[k] + 0.001 * g * g;
          const double mhat = adam_m.values[k] / (1.0 - std::pow(0.9, it));
          const double vhat = adam_v.values[k] / (1.0 - std::pow(0.999, it));
          w.values[k] -= kLearningRate * mhat / (std::sqrt(vhat) + 1e-8);
        }
      }
      (void)any_nonfinite;
    }
    // Binary search update on the trade-off constant.
    for (int r = 0; r < cnt; ++r) {
      if (success_this[r]) {
        c_hi[r] = c_cur[r];
        c_cur[r] = 0.5 * (c_lo[r] + c_hi[r]);
      } else {
        c_lo[r] = c_cur[r];
        c_cur[r] = std::isinf(c_hi[r]) ? c_cur[r] * 10.0 : 0.5 * (c_lo[r] + c_hi[r]);
      }
    }
  }

  for (int r = 0; r < cnt; ++r) {
    const int i = rows[r];
    if (found[r]) {
      std::copy(row_ptr(best_adv, r), row_ptr(best_adv, r) + d, row_ptr(out.adv, i));
      out.success[i] = 1;
    } else if (diverged[r]) {
      out.failed[i] = 1;  // clean pixels kept, never NaN output
    }
  }
  fill_norms(out);
  return out;
}

AdvBatch deepfool_attack(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                         const AttackConfig& cfg, const std::vector<std::uint64_t>* keys_in) {
  cfg.validate();
  if (m.spec.class_count < 2) throw ConfigError("deepfool needs a multiclass model");
  const int n = batch.dim(0), d = batch.dim(1);
  const int classes = m.spec.class_count;
  std::vector<std::uint64_t> keys = default_keys(n, keys_in);
  AdvBatch out = make_result(m, batch, labels, keys);

  for (int i = 0; i < n; ++i) {
    if (!out.attacked[i]) continue;
    Tensor x0 = gather_rows(batch, {i});
    std::vector<double> r_total(d, 0.0);
    Tensor x = x0;
    bool fooled = false;
    for (int it = 0; it < cfg.iterations && !fooled; ++it) {
      ForwardTrace trace;
      Tensor logits = forward_traced(m, x, trace);
      const int pred = argmax_rows(logits)[0];
      if (pred != labels[i]) {
        fooled = true;
        break;
      }
      // Per-class logit gradients against the current prediction.
      Tensor g_pred = logit_input_gradient(m, trace, {pred});
      double best_ratio = std::numeric_limits<double>::infinity();
      std::vector<double> best_w(d, 0.0);
      double best_f = 0.0;
      for (int k = 0; k < classes; ++k) {
        if (k == pred) continue;
        Tensor g_k = logit_input_gradient(m, trace, {k});
        double wnorm_sq = 0.0;
        for (int j = 0; j < d; ++j) {
          const double wj = g_k.values[j] - g_pred.values[j];
          wnorm_sq += wj * wj;
        }
        if (wnorm_sq < 1e-24) continue;
        const double f_k = logits[k] - logits[pred];
        const double ratio = std::fabs(f_k) / std::sqrt(wnorm_sq);
        if (ratio < best_ratio) {
          best_ratio = ratio;
          best_f = f_k;
          for (int j = 0; j < d; ++j) best_w[j] = g_k.values[j] - g_pred.values[j];
        }
      }
      if (!std::isfinite(best_ratio)) break;  // no usable direction
      double wnorm_sq = 0.0;
      for (double wj : best_w) wnorm_sq += wj * wj;
      const double scale = (std::fabs(best_f) + 1e-8) / wnorm_sq;
      for (int j = 0; j < d; ++j) r_total[j] += scale * best_w[j];
      for (int j = 0; j < d; ++j)
        x.values[j] = x0.values[j] + (1.0 + cfg.overshoot) * r_total[j];
    }
    // Final overshoot perturbation, clamped to the valid range.
    for (int j = 0; j < d; ++j) {
      const double v = x0.values[j] + (1.0 + cfg.overshoot) * r_total[j];
      out.adv.at(i, j) = std::clamp(v, cfg.clamp_lo, cfg.clamp_hi);
    }
    const int final_pred = predict(m, gather_rows(out.adv, {i}))[0];
    out.success[i] = final_pred != labels[i] ? 1 : 0;
    if (!fooled && !out.success[i]) out.failed[i] = 1;  // did not converge
  }
  fill_norms(out);
  return out;
}

AdvBatch run_attack(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                    const AttackConfig& cfg, const std::vector<std::uint64_t>* keys) {
  switch (cfg.kind) {
    case AttackKind::kPgd: return pgd_attack(m, batch, labels, cfg, keys);
    case AttackKind::kCwL2: return cw_l2_attack(m, batch, labels, cfg, keys);
    case AttackKind::kDeepFool: return deepfool_attack(m, batch, labels, cfg, keys);
  }
  throw ConfigError("unknown attack kind");
}

std::optional<PerturbationStats> perturbation_stats(const AdvBatch& adv) {
  PerturbationStats st;
  for (int i = 0; i < adv.count(); ++i) {
    if (!adv.success[i]) continue;
    ++st.successes;
    st.mean_l2 += adv.l2[i];
    st.mean_linf += adv.linf[i];
    st.max_l2 = std::max(st.max_l2, adv.l2[i]);
    st.max_linf = std::max(st.max_linf, adv.linf[i]);
  }
  if (st.successes == 0) return std::nullopt;
  st.mean_l2 /= st.successes;
  st.mean_linf /= st.successes;
  return st;
}

BoundaryRaster boundary_raster(const Model& m, const Tensor& image, const Tensor& gradient,
                               double extent, int resolution, std::uint64_t seed) {
  if (image.rank() != 2 || image.dim(0) != 1)
    throw std::invalid_argument("boundary raster expects a single image row");
  if (resolution < 3 || resolution % 2 == 0)
    throw std::invalid_argument("raster resolution must be odd and >= 3");
  const int d = image.dim(1);
  if (gradient.size() != static_cast<std::size_t>(d))
    throw std::invalid_argument("gradient size does not match image");

  double gnorm = 0.0;
  for (double v : gradient.values) gnorm += v * v;
  gnorm = std::sqrt(gnorm);
  if (gnorm == 0.0) throw NumericError("zero attack gradient: cannot build raster basis");

  BoundaryRaster out;
  out.resolution = resolution;
  out.extent = extent;
  out.axis_x.resize(d);
  for (int j = 0; j < d; ++j) out.axis_x[j] = gradient.values[j] / gnorm;

  // Random direction orthogonalized against the gradient axis.
  Rng rng(seed);
  out.axis_y.resize(d);
  for (int attempt = 0; attempt < 16; ++attempt) {
    double dot = 0.0, norm = 0.0;
    for (int j = 0; j < d; ++j) out.axis_y[j] = rng.normal();
    for (int j = 0; j < d; ++j) dot += out.axis_y[j] * out.axis_x[j];
    for (int j = 0; j < d; ++j) out.axis_y[j] -= dot * out.axis_x[j];
    for (int j = 0; j < d; ++j) norm += out.axis_y[j] * out.axis_y[j];
    norm = std::sqrt(norm);
    if (norm > 1e-9) {
      for (int j = 0; j < d; ++j) out.axis_y[j] /= norm;
      break;
    }
    if (attempt == 15) throw NumericError("could not build an orthogonal raster axis");
  }

  const int r = resolution;
  Tensor points = Tensor::zeros({r * r, d});
  for (int iy = 0; iy < r; ++iy) {
    const double b = extent * (2.0 * iy / (r - 1) - 1.0);
    for (int ix = 0; ix < r; ++ix) {
      const double a = extent * (2.0 * ix / (r - 1) - 1.0);
      double* p = row_ptr(points, iy * r + ix);
      for (int j = 0; j < d; ++j) p[j] = image.values[j] + a * out.axis_x[j] + b * out.axis_y[j];
    }
  }
  out.labels = predict(m, points);
  out.center_label = out.labels[(r / 2) * r + (r / 2)];
  return out;
}

namespace {

constexpr std::uint32_t kAdvMagic = 0x42414c54;  // "TLAB"
constexpr std::uint32_t kAdvVersion = 1;

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}

template <typename T>
void write_vec(std::ofstream& os, const std::vector<T>& v) {
  std::uint64_t n = v.size();
  write_pod(os, n);
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void read_vec(std::ifstream& is, std::vector<T>& v) {
  std::uint64_t n = 0;
  read_pod(is, n);
  v.resize(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
}

}  // namespace

void save_adv_batch(const std::string& path, const AdvBatch& batch) {
  batch.check_invariants();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_pod(os, kAdvMagic);
  write_pod(os, kAdvVersion);
  std::uint32_t n = static_cast<std::uint32_t>(batch.count());
  std::uint32_t d = batch.clean.shape.empty() ? 0 : static_cast<std::uint32_t>(batch.clean.dim(1));
  write_pod(os, n);
  write_pod(os, d);
  write_vec(os, batch.clean.values);
  write_vec(os, batch.adv.values);
  write_vec(os, batch.labels);
  write_vec(os, batch.attacked);
  write_vec(os, batch.success);
  write_vec(os, batch.failed);
  write_vec(os, batch.l2);
  write_vec(os, batch.linf);
  write_vec(os, batch.keys);
  if (!os) throw DataError("failed writing adversarial archive " + path);
}

AdvBatch load_adv_batch(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open adversarial archive " + path);
  std::uint32_t magic = 0, version = 0, n = 0, d = 0;
  read_pod(is, magic);
  read_pod(is, version);
  if (magic != kAdvMagic) throw DataError("bad adversarial archive magic in " + path);
  if (version != kAdvVersion) throw DataError("unsupported adversarial archive version in " + path);
  read_pod(is, n);
  read_pod(is, d);
  AdvBatch out;
  read_vec(is, out.clean.values);
  read_vec(is, out.adv.values);
  read_vec(is, out.labels);
  read_vec(is, out.attacked);
  read_vec(is, out.success);
  read_vec(is, out.failed);
  read_vec(is, out.l2);
  read_vec(is, out.linf);
  read_vec(is, out.keys);
  if (!is) throw DataError("truncated adversarial archive " + path);
  out.clean.shape = {static_cast<int>(n), static_cast<int>(d)};
  out.adv.shape = out.clean.shape;
  out.clean.check_invariants();
  out.adv.check_invariants();
  out.check_invariants();
  return out;
}

}  // namespace translab
