#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "translab/attacks.hpp"
#include "translab/model.hpp"
#include "translab/train.hpp"

namespace translab {

struct TransferRecord {
  std::string source_id;
  std::string target_id;
  std::string attack_id;
  double epsilon = 0.0;
  int subset_size = 0;  // common-correct subset
  int f_ss = 0;         // adversarials generated on the source (within subset)
  int f_st = 0;         // of those, also fooling the target
  std::optional<double> tm;  // f_st / f_ss; undefined (not 0) when f_ss == 0
};

// Indices correctly classified by both models. Empty result signals that
// transferability is undefined for the pair.
std::vector<int> common_correct_subset(const std::vector<std::uint8_t>& source_correct,
                                       const std::vector<std::uint8_t>& target_correct);

// TM over a cached source attack restricted to the common-correct subset.
// target == source uses the recorded success mask directly (every generated
// adversarial fools its own source), so self-transfer is exactly 1.
TransferRecord transferability(const AdvBatch& source_batch, const Model& target,
                               const std::vector<int>& subset, const std::string& source_id,
                               const std::string& target_id, const std::string& attack_id,
                               double epsilon);

// Memoizing store for generated attacks keyed by (model id, attack id, eps).
// Entries persist to dir when set; concurrent readers share one computation
// per key.
class AttackCache {
 public:
  explicit AttackCache(std::string dir = "");
  ~AttackCache();
  AttackCache(const AttackCache&) = delete;
  AttackCache& operator=(const AttackCache&) = delete;

  const AdvBatch& get(const Model& source, const std::string& attack_id, const AttackConfig& cfg,
                      const Examples& testset);

  static std::string key_filename(const std::string& model_id, const std::string& attack_id,
                                  double epsilon);

 private:
  struct Entry;
  std::string dir_;
  std::map<std::string, std::unique_ptr<Entry>> entries_;
  std::mutex mu_;
};

// Rows are sources, columns are targets: an adversary choosing a source reads
// row averages, a defender choosing a target reads column averages. Averages
// exclude the diagonal and undefined cells.
struct ConfusionMatrix {
  std::vector<std::string> ids;
  std::vector<std::vector<std::optional<double>>> tm;  // [source][target]
  std::vector<std::optional<double>> row_avg;          // per source
  std::vector<std::optional<double>> col_avg;          // per target
  std::vector<TransferRecord> records;
  // Transferability is not symmetric; |TM(s,t) - TM(t,s)| over defined pairs.
  double mean_abs_asymmetry = 0.0;
  double max_abs_asymmetry = 0.0;

  int index_of(const std::string& id) const;
};

ConfusionMatrix confusion_matrix(const std::vector<const Model*>& catalog,
                                 const Examples& testset, const std::string& attack_id,
                                 const AttackConfig& cfg, AttackCache& cache, int workers = 1);

// Appendix-style saturating curve a * (1 - exp(b * eps)).
struct CurvePoint {
  double eps = 0.0;
  double count = 0.0;
};

double saturating_value(double a, double b, double eps);

struct SaturatingFit {
  double a = 0.0;
  double b = 0.0;
  bool converged = false;
  bool degenerate = false;  // all-zero counts
  int iterations = 0;
  double residual_sse = 0.0;
};

// Damped Gauss-Newton (Levenberg-Marquardt) on (a, b), initialized at
// a = max count, b = -1/median(eps). Needs >= 3 distinct eps values and
// non-negative counts. Non-convergence returns the last iterate with
// converged = false.
SaturatingFit fit_saturating(const std::vector<CurvePoint>& points);

struct FitParams {
  double a = 0.0, b = 0.0;              // f_st curve
  double a_prime = 0.0, b_prime = 0.0;  // f_ss curve
  bool degenerate = false;
  bool converged = false;
  double holdout_rmse_st = 0.0;
  double holdout_rmse_ss = 0.0;
};

FitParams fit_exponential(const std::vector<CurvePoint>& fst_points,
                          const std::vector<CurvePoint>& fss_points,
                          const std::vector<CurvePoint>& holdout_fst = {},
                          const std::vector<CurvePoint>& holdout_fss = {});

// TM(eps) = f_st(eps) / f_ss(eps) clamped to [0,1]; the eps -> 0 limit is
// (a*b) / (a'*b'). Throws NumericError when the f_ss curve is degenerate.
double predict_tm(const FitParams& fit, double eps);

}  // namespace translab
