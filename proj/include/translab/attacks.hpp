#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "translab/model.hpp"
#include "translab/tensor.hpp"

namespace translab {

enum class AttackKind { kPgd, kCwL2, kDeepFool };

std::string to_string(AttackKind k);
AttackKind attack_kind_from_string(const std::string& s);

struct AttackConfig {
  AttackKind kind = AttackKind::kPgd;
  double epsilon = 8.0 / 255.0;  // L-inf bound (pgd); random start scales with it
  double step = 0.01;            // pgd step size, kept separate from the bound
  int iterations = 40;
  double kappa = 0.0;     // cw confidence margin
  double overshoot = 0.02;  // deepfool
  std::uint64_t seed = 0;
  double clamp_lo = 0.0;  // valid input range, set from the dataset
  double clamp_hi = 1.0;

  void validate() const;  // throws ConfigError
};

// Reference configurations from the evaluation protocol.
AttackConfig pgd_reference();                 // 40 iterations, eps 8/255, step 0.01
AttackConfig cw_reference(double kappa);      // 100 iterations
AttackConfig deepfool_reference();            // overshoot 0.02, 50 iterations

struct AdvBatch {
  Tensor clean;
  Tensor adv;
  std::vector<int> labels;
  std::vector<std::uint8_t> attacked;  // classified correctly by the source
  std::vector<std::uint8_t> success;   // source prediction changed
  std::vector<std::uint8_t> failed;    // per-image optimizer failure
  std::vector<double> l2;
  std::vector<double> linf;
  std::vector<std::uint64_t> keys;  // per-image rng/cache keys (testset indices)

  int count() const { return clean.shape.empty() ? 0 : clean.dim(0); }
  void check_invariants() const;
};

// All attacks share the protocol: only images the model classifies correctly
// are attacked; the rest keep their clean pixels with success = 0. Per-image
// randomness is keyed by (cfg.seed, keys[i]) so results do not depend on how
// the batch was assembled. keys defaults to 0..n-1.
AdvBatch pgd_attack(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                    const AttackConfig& cfg, const std::vector<std::uint64_t>* keys = nullptr);

// Carlini-Wagner L2 with tanh box reparameterization and a 5-step binary
// search over the trade-off constant. Successful images carry a logit margin
// of at least kappa; divergence sets the per-image failure flag.
AdvBatch cw_l2_attack(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                      const AttackConfig& cfg, const std::vector<std::uint64_t>* keys = nullptr);

AdvBatch deepfool_attack(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                         const AttackConfig& cfg,
                         const std::vector<std::uint64_t>* keys = nullptr);

AdvBatch run_attack(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                    const AttackConfig& cfg, const std::vector<std::uint64_t>* keys = nullptr);

struct PerturbationStats {
  int successes = 0;
  double mean_l2 = 0.0, max_l2 = 0.0;
  double mean_linf = 0.0, max_linf = 0.0;
};

// Statistics over successful images only; nullopt when nothing succeeded.
std::optional<PerturbationStats> perturbation_stats(const AdvBatch& adv);

struct BoundaryRaster {
  int resolution = 0;
  double extent = 0.0;
  std::vector<double> axis_x;  // unit attack-gradient direction
  std::vector<double> axis_y;  // random unit vector orthogonal to axis_x
  std::vector<int> labels;     // resolution x resolution, row-major in y
  int center_label = -1;
};

// Class-label raster of the plane spanned by the (normalized) attack gradient
// and a seeded random orthogonal direction, centered on the image. resolution
// must be odd and >= 3 so the center cell is the unperturbed image.
BoundaryRaster boundary_raster(const Model& m, const Tensor& image, const Tensor& gradient,
                               double extent, int resolution, std::uint64_t seed);

// Binary archive so sweeps can reuse generated attacks.
void save_adv_batch(const std::string& path, const AdvBatch& batch);
AdvBatch load_adv_batch(const std::string& path);

std::vector<int> predict(const Model& m, const Tensor& batch);

inline double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace translab
