#include "translab/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "translab/errors.hpp"
#include "translab/parallel.hpp"

namespace translab {

std::vector<int> common_correct_subset(const std::vector<std::uint8_t>& source_correct,
                                       const std::vector<std::uint8_t>& target_correct) {
  if (source_correct.size() != target_correct.size())
    throw std::invalid_argument("correctness masks must cover the same testset");
  std::vector<int> out;
  for (std::size_t i = 0; i < source_correct.size(); ++i)
    if (source_correct[i] && target_correct[i]) out.push_back(static_cast<int>(i));
  return out;
}

TransferRecord transferability(const AdvBatch& source_batch, const Model& target,
                               const std::vector<int>& subset, const std::string& source_id,
                               const std::string& target_id, const std::string& attack_id,
                               double epsilon) {
  if (subset.empty()) throw std::invalid_argument("transferability needs a nonempty subset");
  TransferRecord rec;
  rec.source_id = source_id;
  rec.target_id = target_id;
  rec.attack_id = attack_id;
  rec.epsilon = epsilon;
  rec.subset_size = static_cast<int>(subset.size());

  std::vector<int> fooled_rows;
  for (int i : subset)
    if (source_batch.success[i]) fooled_rows.push_back(i);
  rec.f_ss = static_cast<int>(fooled_rows.size());
  if (rec.f_ss == 0) return rec;  // TM undefined, signalled by nullopt

  if (target_id == source_id) {
    rec.f_st = rec.f_ss;  // generated adversarials fool their own source
  } else {
    const int d = source_batch.adv.dim(1);
    Tensor rows = Tensor::zeros({rec.f_ss, d});
    std::vector<int> labels(fooled_rows.size());
    for (std::size_t r = 0; r < fooled_rows.size(); ++r) {
      std::copy(row_ptr(source_batch.adv, fooled_rows[r]),
                row_ptr(source_batch.adv, fooled_rows[r]) + d,
                row_ptr(rows, static_cast<int>(r)));
      labels[r] = source_batch.labels[fooled_rows[r]];
    }
    std::vector<int> pred = predict(target, rows);
    for (std::size_t r = 0; r < fooled_rows.size(); ++r)
      if (pred[r] != labels[r]) ++rec.f_st;
  }
  rec.tm = static_cast<double>(rec.f_st) / static_cast<double>(rec.f_ss);
  return rec;
}

struct AttackCache::Entry {
  std::once_flag once;
  AdvBatch batch;
};

AttackCache::AttackCache(std::string dir) : dir_(std::move(dir)) {}
AttackCache::~AttackCache() = default;

std::string AttackCache::key_filename(const std::string& model_id, const std::string& attack_id,
                                      double epsilon) {
  char eps_str[32];
  std::snprintf(eps_str, sizeof(eps_str), "%.9g", epsilon);
  std::string name = "adv_" + model_id + "_" + attack_id + "_eps" + eps_str + ".bin";
  for (char& c : name)
    if (c == '/' || c == ' ') c = '-';
  return name;
}

const AdvBatch& AttackCache::get(const Model& source, const std::string& attack_id,
                                 const AttackConfig& cfg, const Examples& testset) {
  const std::string key = key_filename(source.id, attack_id, cfg.epsilon);
  Entry* entry = nullptr;
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) it = entries_.emplace(key, std::make_unique<Entry>()).first;
    entry = it->second.get();
  }
  std::call_once(entry->once, [&] {
    if (!dir_.empty()) {
      const std::string path = dir_ + "/" + key;
      if (std::filesystem::exists(path)) {
        entry->batch = load_adv_batch(path);
        return;
      }
    }
    entry->batch = run_attack(source, testset.images, testset.labels, cfg);
    if (!dir_.empty()) {
      std::filesystem::create_directories(dir_);
      const std::string path = dir_ + "/" + key;
      const std::string tmp = path + ".tmp";
      save_adv_batch(tmp, entry->batch);
      std::filesystem::rename(tmp, path);
    }
  });
  return entry->batch;
}

int ConfusionMatrix::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return static_cast<int>(i);
  return -1;
}

ConfusionMatrix confusion_matrix(const std::vector<const Model*>& catalog,
                                 const Examples& testset, const std::string& attack_id,
                                 const AttackConfig& cfg, AttackCache& cache, int workers) {
  if (catalog.empty()) throw ConfigError("confusion matrix needs at least one model");
  const int n = static_cast<int>(catalog.size());
  {
    std::set<std::string> ids;
    for (const Model* m : catalog) ids.insert(m->id);
    if (static_cast<int>(ids.size()) != n)
      throw ConfigError("catalog model ids must be unique");
  }

  ConfusionMatrix cm;
  for (const Model* m : catalog) cm.ids.push_back(m->id);
  cm.tm.assign(n, std::vector<std::optional<double>>(n));

  // Correctness masks, then one cached attack per source.
  std::vector<std::vector<std::uint8_t>> correct(n);
  {
    std::vector<std::function<void()>> tasks;
    for (int i = 0; i < n; ++i)
      tasks.push_back([&, i] { correct[i] = evaluate(*catalog[i], testset).correct; });
    run_parallel(workers, std::move(tasks));
  }
  {
    std::vector<std::function<void()>> tasks;
    for (int i = 0; i < n; ++i)
      tasks.push_back([&, i] { cache.get(*catalog[i], attack_id, cfg, testset); });
    run_parallel(workers, std::move(tasks));
  }

  std::vector<std::vector<TransferRecord>> row_records(n);
  {
    std::vector<std::function<void()>> tasks;
    for (int s = 0; s < n; ++s) {
      tasks.push_back([&, s] {
        const AdvBatch& batch = cache.get(*catalog[s], attack_id, cfg, testset);
        for (int t = 0; t < n; ++t) {
          std::vector<int> subset = common_correct_subset(correct[s], correct[t]);
          TransferRecord rec;
          if (subset.empty()) {
            rec.source_id = catalog[s]->id;
            rec.target_id = catalog[t]->id;
            rec.attack_id = attack_id;
            rec.epsilon = cfg.epsilon;
          } else {
            rec = transferability(batch, *catalog[t], subset, catalog[s]->id, catalog[t]->id,
                                  attack_id, cfg.epsilon);
          }
          row_records[s].push_back(rec);
        }
      });
    }
    run_parallel(workers, std::move(tasks));
  }

  for (int s = 0; s < n; ++s) {
    for (int t = 0; t < n; ++t) {
      cm.tm[s][t] = row_records[s][t].tm;
      cm.records.push_back(row_records[s][t]);
    }
  }

  // Averages exclude the diagonal (self-transfer is identically 1) and
  // undefined cells.
  auto averaged = [&](auto&& cell_at) {
    std::vector<std::optional<double>> out(n);
    for (int i = 0; i < n; ++i) {
      double sum = 0.0;
      int cnt = 0;
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        const std::optional<double>& v = cell_at(i, j);
        if (v) {
          sum += *v;
          ++cnt;
        }
      }
      if (cnt > 0) out[i] = sum / cnt;
    }
    return out;
  };
  cm.row_avg = averaged([&](int s, int t) -> const std::optional<double>& { return cm.tm[s][t]; });
  cm.col_avg = averaged([&](int t, int s) -> const std::optional<double>& { return cm.tm[s][t]; });

  double asym_sum = 0.0;
  int asym_cnt = 0;
  for (int s = 0; s < n; ++s) {
    for (int t = s + 1; t < n; ++t) {
      if (cm.tm[s][t] && cm.tm[t][s]) {
        const double a = std::fabs(*cm.tm[s][t] - *cm.tm[t][s]);
        asym_sum += a;
        cm.max_abs_asymmetry = std::max(cm.max_abs_asymmetry, a);
        ++asym_cnt;
      }
    }
  }
  if (asym_cnt > 0) cm.mean_abs_asymmetry = asym_sum / asym_cnt;
  return cm;
}

double saturating_value(double a, double b, double eps) {
  return a * (1.0 - std::exp(b * eps));
}

namespace {

double curve_sse(const std::vector<CurvePoint>& pts, double a, double b) {
  double sse = 0.0;
  for (const CurvePoint& p : pts) {
    const double r = saturating_value(a, b, p.eps) - p.count;
    sse += r * r;
  }
  return sse;
}

}  // namespace

SaturatingFit fit_saturating(const std::vector<CurvePoint>& points) {
  std::set<double> eps_set;
  double max_count = 0.0;
  for (const CurvePoint& p : points) {
    if (p.count < 0.0) throw std::invalid_argument("curve counts must be non-negative");
    eps_set.insert(p.eps);
    max_count = std::max(max_count, p.count);
  }
  if (eps_set.size() < 3)
    throw std::invalid_argument("curve fit needs at least 3 distinct eps values");

  SaturatingFit fit;
  if (max_count == 0.0) {
    fit.degenerate = true;  // a = 0: no adversarials anywhere on the sweep
    return fit;
  }

  std::vector<double> eps_sorted(eps_set.begin(), eps_set.end());
  const double eps_median = eps_sorted[eps_sorted.size() / 2];
  double a = max_count;
  double b = eps_median > 0.0 ? -1.0 / eps_median : -1.0;
  double sse = curve_sse(points, a, b);

  double lambda = 1e-3;
  constexpr int kMaxIters = 200;
  bool converged = false;
  int it = 0;
  for (; it < kMaxIters && !converged; ++it) {
    // Normal equations for the 2-parameter Jacobian.
    double jtj00 = 0.0, jtj01 = 0.0, jtj11 = 0.0, jtr0 = 0.0, jtr1 = 0.0;
    for (const CurvePoint& p : points) {
      const double e = std::exp(b * p.eps);
      const double r = a * (1.0 - e) - p.count;
      const double ja = 1.0 - e;
      const double jb = -a * p.eps * e;
      jtj00 += ja * ja;
      jtj01 += ja * jb;
      jtj11 += jb * jb;
      jtr0 += ja * r;
      jtr1 += jb * r;
    }

    bool improved = false;
    for (int damp = 0; damp < 60; ++damp) {
      const double d00 = jtj00 * (1.0 + lambda);
      const double d11 = jtj11 * (1.0 + lambda);
      const double det = d00 * d11 - jtj01 * jtj01;
      if (det == 0.0 || !std::isfinite(det)) {
        lambda *= 4.0;
        continue;
      }
      const double da = (-jtr0 * d11 + jtr1 * jtj01) / det;
      const double db = (-jtr1 * d00 + jtr0 * jtj01) / det;
      const double na = a + da, nb = b + db;
      if (!(na > 0.0) || !(nb < 0.0) || !std::isfinite(na) || !std::isfinite(nb)) {
        lambda *= 4.0;
        continue;
      }
      const double nsse = curve_sse(points, na, nb);
      if (nsse < sse) {
        const double rel_gain = (sse - nsse) / std::max(sse, 1e-300);
        a = na;
        b = nb;
        sse = nsse;
        lambda = std::max(lambda / 3.0, 1e-12);
        improved = true;
        if (rel_gain < 1e-12) converged = true;  // down to machine noise
        break;
      }
      lambda *= 4.0;
      if (lambda > 1e16) break;
    }
    if (!improved) converged = true;  // no damped step improves: local minimum
  }

  fit.a = a;
  fit.b = b;
  fit.iterations = it;
  fit.residual_sse = sse;
  fit.converged = converged;  // false only when the iteration cap cut us off
  return fit;
}

FitParams fit_exponential(const std::vector<CurvePoint>& fst_points,
                          const std::vector<CurvePoint>& fss_points,
                          const std::vector<CurvePoint>& holdout_fst,
                          const std::vector<CurvePoint>& holdout_fss) {
  SaturatingFit st = fit_saturating(fst_points);
  SaturatingFit ss = fit_saturating(fss_points);
  FitParams out;
  out.a = st.a;
  out.b = st.b;
  out.a_prime = ss.a;
  out.b_prime = ss.b;
  out.degenerate = st.degenerate || ss.degenerate;
  out.converged = (st.converged || st.degenerate) && (ss.converged || ss.degenerate);

  auto rmse = [](const std::vector<CurvePoint>& pts, double a, double b) {
    if (pts.empty()) return 0.0;
    double sse = 0.0;
    for (const CurvePoint& p : pts) {
      const double r = saturating_value(a, b, p.eps) - p.count;
      sse += r * r;
    }
    return std::sqrt(sse / static_cast<double>(pts.size()));
  };
  out.holdout_rmse_st = rmse(holdout_fst, out.a, out.b);
  out.holdout_rmse_ss = rmse(holdout_fss, out.a_prime, out.b_prime);
  return out;
}

double predict_tm(const FitParams& fit, double eps) {
  if (eps < 0.0) throw std::invalid_argument("eps must be >= 0");
  if (fit.a_prime == 0.0) throw NumericError("f_ss fit is degenerate (a' = 0): TM undefined");
  double tm;
  if (eps == 0.0) {
    // Limit of the ratio as eps -> 0.
    tm = (fit.a * fit.b) / (fit.a_prime * fit.b_prime);
  } else {
    const double denom = saturating_value(fit.a_prime, fit.b_prime, eps);
    if (denom == 0.0) throw NumericError("f_ss curve is zero at the requested eps");
    tm = saturating_value(fit.a, fit.b, eps) / denom;
  }
  return std::clamp(tm, 0.0, 1.0);
}

}  // namespace translab
