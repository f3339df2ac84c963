#include "translab/trend.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "translab/errors.hpp"
#include "translab/parallel.hpp"

namespace translab {

bool SymmetricTMTable::complete() const {
  for (const auto& row : s)
    for (const auto& cell : row)
      if (!cell) return false;
  return true;
}

double SymmetricTMTable::at(int i, int j) const {
  if (!s[i][j]) throw ConfigError("symmetric TM table is incomplete at (" + ids[i] + ", " + ids[j] + ")");
  return *s[i][j];
}

SymmetricTMTable symmetric_table(const ConfusionMatrix& cm) {
  SymmetricTMTable table;
  table.ids = cm.ids;
  const int n = static_cast<int>(cm.ids.size());
  table.s.assign(n, std::vector<std::optional<double>>(n));
  for (int i = 0; i < n; ++i) {
    table.s[i][i] = 1.0;
    for (int j = i + 1; j < n; ++j) {
      if (cm.tm[i][j] && cm.tm[j][i]) {
        const double v = 0.5 * (*cm.tm[i][j] + *cm.tm[j][i]);
        table.s[i][j] = v;
        table.s[j][i] = v;
      }
    }
  }
  return table;
}

double subset_mean_pairwise(const SymmetricTMTable& table, const std::vector<int>& members) {
  if (members.size() < 2) return 0.0;
  double sum = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < members.size(); ++i)
    for (std::size_t j = i + 1; j < members.size(); ++j) {
      sum += table.at(members[i], members[j]);
      ++pairs;
    }
  return sum / pairs;
}

namespace {

std::vector<std::string> sorted_ids(const SymmetricTMTable& table, const std::vector<int>& members) {
  std::vector<std::string> ids;
  for (int m : members) ids.push_back(table.ids[m]);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// subset < best under (score, lexicographic ids)?
bool better(double score, const std::vector<std::string>& ids, double best_score,
            const std::vector<std::string>& best_ids) {
  if (score != best_score) return score < best_score;
  return ids < best_ids;
}

std::vector<int> exhaustive_select(const SymmetricTMTable& table, const std::vector<int>& cand,
                                   int k) {
  const int n = static_cast<int>(cand.size());
  std::vector<int> best;
  std::vector<std::string> best_ids;
  double best_score = std::numeric_limits<double>::infinity();
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (std::popcount(mask) != k) continue;
    std::vector<int> subset;
    for (int i = 0; i < n; ++i)
      if (mask & (1u << i)) subset.push_back(cand[i]);
    const double score = subset_mean_pairwise(table, subset);
    std::vector<std::string> ids = sorted_ids(table, subset);
    if (best.empty() || better(score, ids, best_score, best_ids)) {
      best = subset;
      best_score = score;
      best_ids = ids;
    }
  }
  return best;
}

std::vector<int> greedy_select(const SymmetricTMTable& table, const std::vector<int>& cand,
                               int k) {
  std::vector<int> chosen;
  std::vector<int> remaining = cand;
  auto take = [&](int idx) {
    chosen.push_back(remaining[idx]);
    remaining.erase(remaining.begin() + idx);
  };

  if (k >= 2) {
    // Seed with the lowest-score pair.
    int bi = -1, bj = -1;
    double best_score = std::numeric_limits<double>::infinity();
    std::vector<std::string> best_ids;
    for (std::size_t i = 0; i < remaining.size(); ++i)
      for (std::size_t j = i + 1; j < remaining.size(); ++j) {
        const double sc = table.at(remaining[i], remaining[j]);
        std::vector<std::string> ids = sorted_ids(table, {remaining[i], remaining[j]});
        if (bi < 0 || better(sc, ids, best_score, best_ids)) {
          bi = static_cast<int>(i);
          bj = static_cast<int>(j);
          best_score = sc;
          best_ids = ids;
        }
      }
    take(bj);  // larger index first so bi stays valid
    take(bi);
  } else {
    // k == 1: lexicographically smallest id.
    int bi = 0;
    for (std::size_t i = 1; i < remaining.size(); ++i)
      if (table.ids[remaining[i]] < table.ids[remaining[bi]]) bi = static_cast<int>(i);
    take(bi);
  }

  while (static_cast<int>(chosen.size()) < k) {
    int bi = -1;
    double best_score = std::numeric_limits<double>::infinity();
    std::vector<std::string> best_ids;
    for (std::size_t i = 0; i < remaining.size(); ++i) {
      std::vector<int> trial = chosen;
      trial.push_back(remaining[i]);
      const double sc = subset_mean_pairwise(table, trial);
      std::vector<std::string> ids = sorted_ids(table, trial);
      if (bi < 0 || better(sc, ids, best_score, best_ids)) {
        bi = static_cast<int>(i);
        best_score = sc;
        best_ids = ids;
      }
    }
    take(bi);
  }
  return chosen;
}

}  // namespace

EnsembleSpec select_ensemble(const SymmetricTMTable& table, int k, std::uint64_t tie_seed,
                             const std::map<std::string, double>* clean_accuracy,
                             std::optional<double> accuracy_floor) {
  const int n = static_cast<int>(table.ids.size());
  std::vector<int> candidates;
  for (int i = 0; i < n; ++i) {
    if (accuracy_floor && clean_accuracy) {
      auto it = clean_accuracy->find(table.ids[i]);
      if (it == clean_accuracy->end())
        throw ConfigError("no clean accuracy recorded for " + table.ids[i]);
      if (it->second < *accuracy_floor) continue;
    }
    candidates.push_back(i);
  }
  if (k < 1 || k > static_cast<int>(candidates.size()))
    throw ConfigError("ensemble size k = " + std::to_string(k) + " is out of range for " +
                      std::to_string(candidates.size()) + " candidates");
  for (int i : candidates)
    for (int j : candidates)
      if (!table.s[i][j])
        throw ConfigError("symmetric TM table is incomplete over the candidate set");

  std::vector<int> members = candidates.size() <= 15 ? exhaustive_select(table, candidates, k)
                                                     : greedy_select(table, candidates, k);
  std::sort(members.begin(), members.end(),
            [&](int a, int b) { return table.ids[a] < table.ids[b]; });
  EnsembleSpec spec;
  for (int m : members) spec.member_ids.push_back(table.ids[m]);
  spec.tie_seed = tie_seed;
  spec.validate();
  return spec;
}

RobustnessReport evaluate_robustness(const ModelRefs& members, const EnsembleSpec& spec,
                                     const std::vector<EnsembleMethod>& methods,
                                     const std::vector<double>& eps_grid,
                                     const Examples& testset, const AttackConfig& base_cfg,
                                     int workers) {
  if (members.size() != spec.member_ids.size())
    throw ConfigError("member models do not match the ensemble spec");
  RobustnessReport report;
  report.member_ids = spec.member_ids;

  std::vector<int> clean_pred = ensemble_predict(members, testset.images, spec.tie_seed);
  int hits = 0;
  for (std::size_t i = 0; i < clean_pred.size(); ++i)
    hits += clean_pred[i] == testset.labels[i];
  report.clean_accuracy = static_cast<double>(hits) / static_cast<double>(clean_pred.size());

  struct Job {
    EnsembleMethod method;
    double eps;
  };
  std::vector<Job> jobs;
  for (double eps : eps_grid)
    for (EnsembleMethod m : methods) jobs.push_back({m, eps});

  std::vector<RobustnessCell> cells(jobs.size());
  std::vector<std::function<void()>> tasks;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    tasks.push_back([&, j] {
      AttackConfig cfg = base_cfg;
      cfg.epsilon = jobs[j].eps;
      EnsembleAttackResult res = ensemble_attack(members, testset.images, testset.labels, cfg,
                                                 jobs[j].method, spec.tie_seed);
      RobustnessCell cell;
      cell.method = jobs[j].method;
      cell.epsilon = jobs[j].eps;
      cell.success_rate = res.success_rate;
      cell.adv_accuracy = report.clean_accuracy * (1.0 - res.success_rate);
      cells[j] = cell;
    });
  }
  run_parallel(workers, std::move(tasks));
  report.cells = cells;

  for (double eps : eps_grid) {
    double worst = std::numeric_limits<double>::infinity();
    for (const RobustnessCell& c : cells)
      if (c.epsilon == eps) worst = std::min(worst, c.adv_accuracy);
    report.strongest_attack.emplace_back(eps, worst);
  }
  return report;
}

}  // namespace translab
