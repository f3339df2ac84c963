#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "translab/ensemble.hpp"
#include "translab/transfer.hpp"

namespace translab {

// Pairwise transferability symmetrized by exchanging source and target:
// s(i,j) = (TM(i->j) + TM(j->i)) / 2, s(i,i) = 1.
struct SymmetricTMTable {
  std::vector<std::string> ids;
  std::vector<std::vector<std::optional<double>>> s;

  bool complete() const;
  double at(int i, int j) const;  // throws on undefined cells
};

SymmetricTMTable symmetric_table(const ConfusionMatrix& cm);

// Mean pairwise score of a member subset (0 for singletons).
double subset_mean_pairwise(const SymmetricTMTable& table, const std::vector<int>& members);

// The size-k subset minimizing mean pairwise symmetric TM: exhaustive for
// catalogs up to 15, greedy augmentation beyond. Ties break toward the
// lexicographically smallest member-id list. Candidates below the optional
// clean-accuracy floor are excluded before selection.
EnsembleSpec select_ensemble(const SymmetricTMTable& table, int k, std::uint64_t tie_seed = 0,
                             const std::map<std::string, double>* clean_accuracy = nullptr,
                             std::optional<double> accuracy_floor = std::nullopt);

struct RobustnessCell {
  EnsembleMethod method = EnsembleMethod::kDag;
  double epsilon = 0.0;
  double success_rate = 0.0;  // over attacked (initially correct) images
  double adv_accuracy = 0.0;  // fraction of the whole testset still correct
};

struct RobustnessReport {
  std::vector<std::string> member_ids;
  double clean_accuracy = 0.0;
  std::vector<RobustnessCell> cells;  // ordered by (eps, method)
  // Per epsilon, the minimum adversarial accuracy over methods.
  std::vector<std::pair<double, double>> strongest_attack;
};

// Attacks the ensemble with every (method, eps) pair. Adversarial accuracy is
// clean_accuracy * (1 - success_rate): images the ensemble already gets wrong
// stay wrong, so eps = 0 reproduces the clean accuracy.
RobustnessReport evaluate_robustness(const ModelRefs& members, const EnsembleSpec& spec,
                                     const std::vector<EnsembleMethod>& methods,
                                     const std::vector<double>& eps_grid,
                                     const Examples& testset, const AttackConfig& base_cfg,
                                     int workers = 1);

}  // namespace translab
