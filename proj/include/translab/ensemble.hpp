#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "translab/attacks.hpp"
#include "translab/model.hpp"
#include "translab/tensor.hpp"

namespace translab {

struct EnsembleSpec {
  std::vector<std::string> member_ids;  // ordered, distinct
  std::uint64_t tie_seed = 0;

  int size() const { return static_cast<int>(member_ids.size()); }
  void validate() const;  // throws ConfigError on duplicates / empty
};

enum class EnsembleMethod { kDag, kUgd, kAgd, kEmpir };

std::string to_string(EnsembleMethod m);
EnsembleMethod ensemble_method_from_string(const std::string& s);

using ModelRefs = std::vector<const Model*>;

// Majority vote over member predictions. When the top vote count is tied, a
// uniformly random member is chosen and its prediction used; the draw is
// keyed by (tie_seed, step, image key) so replays are deterministic, the
// attack loop can re-draw per step, and subset evaluations agree with
// full-batch ones. keys defaults to batch positions.
std::vector<int> ensemble_predict(const ModelRefs& members, const Tensor& batch,
                                  std::uint64_t tie_seed, std::uint64_t step = 0,
                                  const std::vector<std::uint64_t>* keys = nullptr);

// Per-coordinate sign with sgn(0) = 0; entries in {-1, 0, +1}.
Tensor sign_tensor(const Tensor& g);

// D-AG: sign of the average gradient (magnitude-weighted, so one member with
// a dominant gradient norm controls the direction).
Tensor dag_direction(const std::vector<Tensor>& grads);

// U-GD: +-1 exactly where every member's gradient sign agrees, 0 elsewhere.
Tensor ugd_direction(const std::vector<Tensor>& grads);

// A-GD: sign of the averaged signs, i.e. a per-coordinate majority vote.
Tensor agd_direction(const std::vector<Tensor>& grads);

// EMPIR style: average gradients of the members that voted for the ensemble
// prediction; falls back to all members when that subset is empty.
Tensor empir_direction(const std::vector<Tensor>& grads,
                       const std::vector<std::vector<int>>& member_votes,
                       const std::vector<int>& ensemble_pred);

struct DirectionState {
  std::vector<Tensor> grads;   // G_i
  std::vector<Tensor> signs;   // S_i = sgn(G_i)
  Tensor avg_sign;             // A = mean_i S_i
  Tensor unanimity;            // M: +-1 on unanimous coordinates, else 0
  Tensor direction;            // D for the requested method
  EnsembleMethod method = EnsembleMethod::kDag;
};

DirectionState direction_state(const std::vector<Tensor>& grads, EnsembleMethod method,
                               const std::vector<std::vector<int>>* member_votes = nullptr,
                               const std::vector<int>* ensemble_pred = nullptr);

// Gradients and direction at one attack step (no update applied).
DirectionState attack_step_state(const ModelRefs& members, const Tensor& x,
                                 const std::vector<int>& labels, EnsembleMethod method,
                                 std::uint64_t tie_seed);

struct DominationReport {
  std::vector<double> member_agreement;  // fraction of coordinates with D == S_i
  double none_agree = 0.0;               // fraction where D differs from every S_i
};

DominationReport domination_report(const DirectionState& state);

struct EnsembleAttackResult {
  AdvBatch batch;
  double success_rate = 0.0;  // fraction of attacked images whose vote flipped
};

// Iterative sign attack on the majority vote, parameterized by the direction
// rule. Only images the ensemble classifies correctly are attacked; the
// L-inf ball projection, range clamp and per-image random start match the
// single-model PGD, so an N=1 ensemble reproduces it step for step.
EnsembleAttackResult ensemble_attack(const ModelRefs& members, const Tensor& batch,
                                     const std::vector<int>& labels, const AttackConfig& cfg,
                                     EnsembleMethod method, std::uint64_t tie_seed,
                                     const std::vector<std::uint64_t>* keys = nullptr);

}  // namespace translab
