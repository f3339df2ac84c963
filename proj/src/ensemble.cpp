#include "translab/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "translab/errors.hpp"
#include "translab/rng.hpp"

namespace translab {

void EnsembleSpec::validate() const {
  if (member_ids.empty()) throw ConfigError("ensemble needs at least one member");
  std::set<std::string> seen(member_ids.begin(), member_ids.end());
  if (seen.size() != member_ids.size()) throw ConfigError("ensemble member ids must be distinct");
}

std::string to_string(EnsembleMethod m) {
  switch (m) {
    case EnsembleMethod::kDag: return "dag";
    case EnsembleMethod::kUgd: return "ugd";
    case EnsembleMethod::kAgd: return "agd";
    case EnsembleMethod::kEmpir: return "empir";
  }
  return "?";
}

EnsembleMethod ensemble_method_from_string(const std::string& s) {
  if (s == "dag") return EnsembleMethod::kDag;
  if (s == "ugd") return EnsembleMethod::kUgd;
  if (s == "agd") return EnsembleMethod::kAgd;
  if (s == "empir") return EnsembleMethod::kEmpir;
  throw ConfigError("unknown ensemble attack method: " + s);
}

std::vector<int> ensemble_predict(const ModelRefs& members, const Tensor& batch,
                                  std::uint64_t tie_seed, std::uint64_t step,
                                  const std::vector<std::uint64_t>* keys) {
  if (members.empty()) throw ConfigError("cannot predict with an empty ensemble");
  const int n = batch.dim(0);
  if (keys && static_cast<int>(keys->size()) != n)
    throw std::invalid_argument("keys size does not match batch");
  const int classes = members[0]->spec.class_count;
  for (const Model* m : members)
    if (m->spec.class_count != classes || m->input_features() != members[0]->input_features())
      throw ConfigError("ensemble members must share input and class spaces");

  std::vector<std::vector<int>> votes;
  votes.reserve(members.size());
  for (const Model* m : members) votes.push_back(predict(*m, batch));

  std::vector<int> out(n);
  std::vector<int> counts(classes);
  for (int i = 0; i < n; ++i) {
    std::fill(counts.begin(), counts.end(), 0);
    for (const auto& v : votes) ++counts[v[i]];
    int best = 0, best_count = -1, with_best = 0;
    for (int c = 0; c < classes; ++c) {
      if (counts[c] > best_count) {
        best = c;
        best_count = counts[c];
        with_best = 1;
      } else if (counts[c] == best_count) {
        ++with_best;
      }
    }
    if (with_best == 1) {
      out[i] = best;
    } else {
      // Conflict: a uniformly random member decides.
      const std::uint64_t key = keys ? (*keys)[i] : static_cast<std::uint64_t>(i);
      Rng rng = Rng::keyed(tie_seed, step, key);
      out[i] = votes[rng.uniform_int(static_cast<int>(members.size()))][i];
    }
  }
  return out;
}

Tensor sign_tensor(const Tensor& g) {
  Tensor s = g;
  for (double& v : s.values) v = sign_of(v);
  return s;
}

namespace {

void check_same_shapes(const std::vector<Tensor>& grads) {
  if (grads.empty()) throw std::invalid_argument("direction rules need at least one gradient");
  for (const Tensor& g : grads)
    if (!same_shape(g, grads.front()))
      throw std::invalid_argument("member gradients must share one shape");
}

}  // namespace

Tensor dag_direction(const std::vector<Tensor>& grads) {
  check_same_shapes(grads);
  Tensor d = Tensor::zeros(grads.front().shape);
  for (const Tensor& g : grads)
    for (std::size_t i = 0; i < d.values.size(); ++i) d.values[i] += g.values[i];
  for (double& v : d.values) v = sign_of(v);
  return d;
}

Tensor ugd_direction(const std::vector<Tensor>& grads) {
  check_same_shapes(grads);
  const double n = static_cast<double>(grads.size());
  Tensor d = Tensor::zeros(grads.front().shape);
  for (const Tensor& g : grads)
    for (std::size_t i = 0; i < d.values.size(); ++i) d.values[i] += sign_of(g.values[i]);
  // Unanimity: |sum of signs| == N. Sign sums are exact small integers.
  for (double& v : d.values) v = v == n ? 1.0 : (v == -n ? -1.0 : 0.0);
  return d;
}

Tensor agd_direction(const std::vector<Tensor>& grads) {
  check_same_shapes(grads);
  Tensor d = Tensor::zeros(grads.front().shape);
  for (const Tensor& g : grads)
    for (std::size_t i = 0; i < d.values.size(); ++i) d.values[i] += sign_of(g.values[i]);
  for (double& v : d.values) v = sign_of(v);
  return d;
}

Tensor empir_direction(const std::vector<Tensor>& grads,
                       const std::vector<std::vector<int>>& member_votes,
                       const std::vector<int>& ensemble_pred) {
  check_same_shapes(grads);
  if (member_votes.size() != grads.size())
    throw std::invalid_argument("one vote list per member expected");
  const Tensor& g0 = grads.front();
  const int n = g0.dim(0), d = g0.dim(1);
  if (static_cast<int>(ensemble_pred.size()) != n)
    throw std::invalid_argument("ensemble prediction size mismatch");

  Tensor out = Tensor::zeros(g0.shape);
  for (int r = 0; r < n; ++r) {
    std::vector<int> subset;
    for (std::size_t m = 0; m < grads.size(); ++m)
      if (member_votes[m][r] == ensemble_pred[r]) subset.push_back(static_cast<int>(m));
    if (subset.empty())  // nobody voted the (tie-broken) prediction: use all
      for (std::size_t m = 0; m < grads.size(); ++m) subset.push_back(static_cast<int>(m));
    double* orow = row_ptr(out, r);
    for (int mi : subset) {
      const double* grow = row_ptr(grads[mi], r);
      for (int j = 0; j < d; ++j) orow[j] += grow[j];
    }
    for (int j = 0; j < d; ++j) orow[j] = sign_of(orow[j]);
  }
  return out;
}

DirectionState direction_state(const std::vector<Tensor>& grads, EnsembleMethod method,
                               const std::vector<std::vector<int>>* member_votes,
                               const std::vector<int>* ensemble_pred) {
  check_same_shapes(grads);
  DirectionState st;
  st.method = method;
  st.grads = grads;
  st.signs.reserve(grads.size());
  for (const Tensor& g : grads) st.signs.push_back(sign_tensor(g));

  const double n = static_cast<double>(grads.size());
  st.avg_sign = Tensor::zeros(grads.front().shape);
  for (const Tensor& s : st.signs)
    for (std::size_t i = 0; i < st.avg_sign.values.size(); ++i)
      st.avg_sign.values[i] += s.values[i];
  st.unanimity = st.avg_sign;
  for (double& v : st.unanimity.values) v = v == n ? 1.0 : (v == -n ? -1.0 : 0.0);
  for (double& v : st.avg_sign.values) v /= n;

  switch (method) {
    case EnsembleMethod::kDag:
      st.direction = dag_direction(grads);
      break;
    case EnsembleMethod::kUgd:
      st.direction = st.unanimity;
      break;
    case EnsembleMethod::kAgd:
      st.direction = agd_direction(grads);
      break;
    case EnsembleMethod::kEmpir:
      if (!member_votes || !ensemble_pred)
        throw std::invalid_argument("empir direction needs member votes and ensemble prediction");
      st.direction = empir_direction(grads, *member_votes, *ensemble_pred);
      break;
  }
  return st;
}

DirectionState attack_step_state(const ModelRefs& members, const Tensor& x,
                                 const std::vector<int>& labels, EnsembleMethod method,
                                 std::uint64_t tie_seed) {
  std::vector<Tensor> grads;
  grads.reserve(members.size());
  for (const Model* m : members) grads.push_back(input_gradient(*m, x, labels));
  if (method == EnsembleMethod::kEmpir) {
    std::vector<std::vector<int>> votes;
    for (const Model* m : members) votes.push_back(predict(*m, x));
    std::vector<int> pred = ensemble_predict(members, x, tie_seed, /*step=*/0);
    return direction_state(grads, method, &votes, &pred);
  }
  return direction_state(grads, method);
}

DominationReport domination_report(const DirectionState& state) {
  DominationReport rep;
  const std::size_t coords = state.direction.values.size();
  rep.member_agreement.assign(state.signs.size(), 0.0);
  std::size_t none = 0;
  for (std::size_t i = 0; i < coords; ++i) {
    bool any = false;
    for (std::size_t m = 0; m < state.signs.size(); ++m) {
      if (state.direction.values[i] == state.signs[m].values[i]) {
        rep.member_agreement[m] += 1.0;
        any = true;
      }
    }
    if (!any) ++none;
  }
  for (double& v : rep.member_agreement) v /= static_cast<double>(coords);
  rep.none_agree = static_cast<double>(none) / static_cast<double>(coords);
  return rep;
}

EnsembleAttackResult ensemble_attack(const ModelRefs& members, const Tensor& batch,
                                     const std::vector<int>& labels, const AttackConfig& cfg,
                                     EnsembleMethod method, std::uint64_t tie_seed,
                                     const std::vector<std::uint64_t>* keys_in) {
  cfg.validate();
  if (members.empty()) throw ConfigError("cannot attack an empty ensemble");
  const int n = batch.dim(0), d = batch.dim(1);

  std::vector<std::uint64_t> keys;
  if (keys_in) {
    if (static_cast<int>(keys_in->size()) != n)
      throw std::invalid_argument("keys size does not match batch");
    keys = *keys_in;
  } else {
    keys.resize(n);
    for (int i = 0; i < n; ++i) keys[i] = static_cast<std::uint64_t>(i);
  }

  EnsembleAttackResult result;
  AdvBatch& out = result.batch;
  out.clean = batch;
  out.adv = batch;
  out.labels = labels;
  out.keys = keys;
  out.attacked.assign(n, 0);
  out.success.assign(n, 0);
  out.failed.assign(n, 0);
  out.l2.assign(n, 0.0);
  out.linf.assign(n, 0.0);

  std::vector<int> clean_pred = ensemble_predict(members, batch, tie_seed, /*step=*/0, &keys);
  std::vector<int> rows;
  for (int i = 0; i < n; ++i) {
    out.attacked[i] = clean_pred[i] == labels[i] ? 1 : 0;
    if (out.attacked[i]) rows.push_back(i);
  }
  if (rows.empty()) return result;
  const int cnt = static_cast<int>(rows.size());

  Tensor nat = Tensor::zeros({cnt, d});
  std::vector<int> sub_labels(cnt);
  std::vector<std::uint64_t> sub_keys(cnt);
  for (int r = 0; r < cnt; ++r) {
    std::copy(row_ptr(batch, rows[r]), row_ptr(batch, rows[r]) + d, row_ptr(nat, r));
    sub_labels[r] = labels[rows[r]];
    sub_keys[r] = keys[rows[r]];
  }

  // Identical random start to the single-model PGD.
  Tensor x = nat;
  for (int r = 0; r < cnt; ++r) {
    Rng rng = Rng::keyed(cfg.seed, sub_keys[r]);
    double* xr = row_ptr(x, r);
    for (int j = 0; j < d; ++j)
      xr[j] = std::clamp(xr[j] + cfg.epsilon * rng.uniform(-1.0, 1.0), cfg.clamp_lo, cfg.clamp_hi);
  }

  for (int it = 1; it <= cfg.iterations; ++it) {
    std::vector<Tensor> grads;
    grads.reserve(members.size());
    for (const Model* m : members) grads.push_back(input_gradient(*m, x, sub_labels));

    Tensor dir;
    switch (method) {
      case EnsembleMethod::kDag:
        dir = dag_direction(grads);
        break;
      case EnsembleMethod::kUgd:
        dir = ugd_direction(grads);
        break;
      case EnsembleMethod::kAgd:
        dir = agd_direction(grads);
        break;
      case EnsembleMethod::kEmpir: {
        std::vector<std::vector<int>> votes;
        votes.reserve(members.size());
        for (const Model* m : members) votes.push_back(predict(*m, x));
        std::vector<int> pred =
            ensemble_predict(members, x, tie_seed, static_cast<std::uint64_t>(it), &sub_keys);
        dir = empir_direction(grads, votes, pred);
        break;
      }
    }

    for (int r = 0; r < cnt; ++r) {
      double* xr = row_ptr(x, r);
      const double* dr = row_ptr(dir, r);
      const double* natr = row_ptr(nat, r);
      for (int j = 0; j < d; ++j) {
        double v = xr[j] + cfg.step * dr[j];
        v = std::clamp(v, natr[j] - cfg.epsilon, natr[j] + cfg.epsilon);
        xr[j] = std::clamp(v, cfg.clamp_lo, cfg.clamp_hi);
      }
    }
  }

  // Final evaluation uses the canonical step-0 tie stream: what any consumer
  // of the adversarial batch would compute, and exact at eps = 0.
  std::vector<int> adv_pred = ensemble_predict(members, x, tie_seed, /*step=*/0, &sub_keys);
  int flipped = 0;
  for (int r = 0; r < cnt; ++r) {
    const int i = rows[r];
    std::copy(row_ptr(x, r), row_ptr(x, r) + d, row_ptr(out.adv, i));
    out.success[i] = adv_pred[r] != sub_labels[r] ? 1 : 0;
    flipped += out.success[i];
  }
  const int dd = out.clean.dim(1);
  for (int i = 0; i < n; ++i) {
    const double* c = row_ptr(out.clean, i);
    const double* a = row_ptr(out.adv, i);
    double sq = 0.0, mx = 0.0;
    for (int j = 0; j < dd; ++j) {
      const double delta = a[j] - c[j];
      sq += delta * delta;
      mx = std::max(mx, std::fabs(delta));
    }
    out.l2[i] = std::sqrt(sq);
    out.linf[i] = mx;
  }
  result.success_rate = static_cast<double>(flipped) / static_cast<double>(cnt);
  return result;
}

}  // namespace translab
