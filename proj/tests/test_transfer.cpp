#include <cmath>
#include <vector>

#include "doctest.h"
#include "test_support.hpp"
#include "translab/attacks.hpp"
#include "translab/errors.hpp"
#include "translab/transfer.hpp"

using namespace translab;
using namespace translab::testing;

namespace {

// 1-feature binary model predicting class 1 iff x > threshold.
Model threshold_model(double threshold, const std::string& id) {
  ModelSpec spec = make_dense_spec(Family::kPlainFeedforward, 1, 1, {}, 2, 0);
  Model m = Model::init(spec, id);
  m.params[0].values = {0.0, 1.0};
  m.params[1].values = {0.0, -threshold};
  return m;
}

}  // namespace

TEST_CASE("common correct subset") {
  std::vector<std::uint8_t> a = {1, 1, 0, 1};
  std::vector<std::uint8_t> b = {1, 0, 0, 1};
  CHECK(common_correct_subset(a, b) == std::vector<int>{0, 3});
  CHECK(common_correct_subset(a, a) == std::vector<int>{0, 1, 3});  // self = own correct set

  std::vector<std::uint8_t> c = {0, 0, 1, 0};
  CHECK(common_correct_subset(a, c).empty());  // disjoint -> undefined downstream

  std::vector<std::uint8_t> short_mask = {1};
  CHECK_THROWS_AS(common_correct_subset(a, short_mask), std::invalid_argument);
}

TEST_CASE("transferability counts match the brute-force construction") {
  // 10000 images, all labeled 0; the source fooled 9085 of them and 8166 of
  // those also cross the target threshold. Mirrors the reported
  // ResNet18/SGD/PGD row (89.89 +- 1.14 trans-%).
  const int n = 10000, f_ss = 9085, f_st = 8166;
  AdvBatch batch;
  batch.clean = Tensor::zeros({n, 1});
  batch.adv = Tensor::zeros({n, 1});
  batch.labels.assign(n, 0);
  batch.attacked.assign(n, 1);
  batch.success.assign(n, 0);
  batch.failed.assign(n, 0);
  batch.l2.assign(n, 0.0);
  batch.linf.assign(n, 0.0);
  batch.keys.resize(n);
  for (int i = 0; i < n; ++i) {
    batch.keys[i] = i;
    batch.clean.at(i, 0) = -1.0;
    if (i < f_ss) {
      batch.success[i] = 1;
      batch.adv.at(i, 0) = i < f_st ? 1.0 : -1.0;  // cross the target only for f_st
    } else {
      batch.adv.at(i, 0) = -1.0;
    }
  }

  Model target = threshold_model(0.0, "tgt");
  std::vector<int> subset(n);
  for (int i = 0; i < n; ++i) subset[i] = i;

  TransferRecord rec = transferability(batch, target, subset, "src", "tgt", "pgd", 0.1);
  CHECK(rec.f_ss == f_ss);
  CHECK(rec.f_st == f_st);
  REQUIRE(rec.tm.has_value());
  CHECK(*rec.tm == doctest::Approx(static_cast<double>(f_st) / f_ss).epsilon(1e-12));
  CHECK(std::fabs(*rec.tm - 0.8989) < 0.0012);  // inside the reported band

  SUBCASE("self-transfer is exactly 1") {
    TransferRecord self = transferability(batch, target, subset, "src", "src", "pgd", 0.1);
    REQUIRE(self.tm.has_value());
    CHECK(*self.tm == 1.0);
    CHECK(self.f_st == self.f_ss);
  }
  SUBCASE("f_st = 0 gives TM = 0") {
    Model far_target = threshold_model(10.0, "far");  // nothing crosses
    TransferRecord zero = transferability(batch, far_target, subset, "src", "far", "pgd", 0.1);
    CHECK(zero.f_st == 0);
    REQUIRE(zero.tm.has_value());
    CHECK(*zero.tm == 0.0);
  }
  SUBCASE("f_ss = 0 leaves TM undefined, never 0") {
    std::vector<int> unfooled;
    for (int i = f_ss; i < n; ++i) unfooled.push_back(i);
    TransferRecord und = transferability(batch, target, unfooled, "src", "tgt", "pgd", 0.1);
    CHECK(und.f_ss == 0);
    CHECK(!und.tm.has_value());
  }
  SUBCASE("empty subset is rejected") {
    CHECK_THROWS_AS(transferability(batch, target, {}, "s", "t", "a", 0.1),
                    std::invalid_argument);
  }
}

TEST_CASE("confusion matrix: single model and hand-checked pair") {
  Examples data = make_prototype_data(3, 8, 40, 0.3, 422);
  Model a = train_tiny(data, 3, 10, 91);
  a.id = "a";
  Model b = train_tiny(data, 3, 10, 92);
  b.id = "b";

  AttackConfig cfg = pgd_reference();
  cfg.epsilon = 0.3;
  cfg.step = 0.06;
  cfg.iterations = 20;
  cfg.clamp_lo = -4.0;
  cfg.clamp_hi = 4.0;

  SUBCASE("catalog of one") {
    AttackCache cache;
    ConfusionMatrix cm = confusion_matrix({&a}, data, "pgd", cfg, cache);
    REQUIRE(cm.ids == std::vector<std::string>{"a"});
    REQUIRE(cm.tm[0][0].has_value());
    CHECK(*cm.tm[0][0] == 1.0);
    CHECK(!cm.row_avg[0].has_value());  // averages exclude the diagonal
  }

  SUBCASE("pair matches the direct recomputation") {
    AttackCache cache;
    ConfusionMatrix cm = confusion_matrix({&a, &b}, data, "pgd", cfg, cache);
    CHECK(*cm.tm[0][0] == 1.0);
    CHECK(*cm.tm[1][1] == 1.0);

    // Brute-force cell (a -> b).
    AdvBatch adv_a = pgd_attack(a, data.images, data.labels, cfg);
    std::vector<std::uint8_t> ca = evaluate(a, data).correct, cb = evaluate(b, data).correct;
    std::vector<int> subset = common_correct_subset(ca, cb);
    int fss = 0, fst = 0;
    for (int i : subset) {
      if (!adv_a.success[i]) continue;
      ++fss;
      Tensor row = Tensor::zeros({1, data.images.dim(1)});
      for (int j = 0; j < row.dim(1); ++j) row.at(0, j) = adv_a.adv.at(i, j);
      if (predict(b, row)[0] != data.labels[i]) ++fst;
    }
    REQUIRE(fss > 0);
    REQUIRE(cm.tm[0][1].has_value());
    CHECK(*cm.tm[0][1] == doctest::Approx(static_cast<double>(fst) / fss).epsilon(1e-12));

    // Row/column averages over the single off-diagonal cell.
    CHECK(*cm.row_avg[0] == doctest::Approx(*cm.tm[0][1]));
    CHECK(*cm.col_avg[1] == doctest::Approx(*cm.tm[0][1]));
    // Asymmetry is reported, not assumed zero.
    CHECK(cm.max_abs_asymmetry ==
          doctest::Approx(std::fabs(*cm.tm[0][1] - *cm.tm[1][0])));

    // Cache determinism: a second evaluation returns identical cells.
    ConfusionMatrix cm2 = confusion_matrix({&a, &b}, data, "pgd", cfg, cache);
    for (int s = 0; s < 2; ++s)
      for (int t = 0; t < 2; ++t) CHECK(*cm2.tm[s][t] == *cm.tm[s][t]);
  }
}

TEST_CASE("saturating fit recovers the generator within 1%") {
  const double a = 1000.0, b = -100.0;
  std::vector<CurvePoint> pts;
  for (double eps : {0.005, 0.01, 0.02, 0.04}) pts.push_back({eps, saturating_value(a, b, eps)});
  SaturatingFit fit = fit_saturating(pts);
  CHECK(fit.converged);
  CHECK(!fit.degenerate);
  CHECK(std::fabs(fit.a - a) / a < 0.01);
  CHECK(std::fabs(fit.b - b) / std::fabs(b) < 0.01);
}

TEST_CASE("four-point fit predicts a dense synthetic curve") {
  const double a_st = 800.0, b_st = -60.0, a_ss = 950.0, b_ss = -120.0;
  std::vector<CurvePoint> st4, ss4, st20, ss20;
  for (int i = 0; i < 20; ++i) {
    const double eps = 0.005 + i * 0.005;
    st20.push_back({eps, saturating_value(a_st, b_st, eps)});
    ss20.push_back({eps, saturating_value(a_ss, b_ss, eps)});
  }
  for (int idx : {0, 4, 9, 19}) {
    st4.push_back(st20[idx]);
    ss4.push_back(ss20[idx]);
  }
  FitParams fit = fit_exponential(st4, ss4, st20, ss20);
  CHECK(fit.converged);
  CHECK(fit.holdout_rmse_st < 0.05 * a_st);
  CHECK(fit.holdout_rmse_ss < 0.05 * a_ss);

  // Fitted curves are non-decreasing in eps (b < 0).
  CHECK(fit.b < 0.0);
  double prev = -1.0;
  for (const CurvePoint& p : st20) {
    const double v = saturating_value(fit.a, fit.b, p.eps);
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("fit input validation and degenerate curves") {
  std::vector<CurvePoint> two = {{0.1, 5.0}, {0.2, 8.0}};
  CHECK_THROWS_AS(fit_saturating(two), std::invalid_argument);

  std::vector<CurvePoint> negative = {{0.1, 5.0}, {0.2, -1.0}, {0.3, 8.0}};
  CHECK_THROWS_AS(fit_saturating(negative), std::invalid_argument);

  std::vector<CurvePoint> zeros = {{0.1, 0.0}, {0.2, 0.0}, {0.3, 0.0}};
  SaturatingFit fit = fit_saturating(zeros);
  CHECK(fit.degenerate);
  CHECK(fit.a == 0.0);

  FitParams params = fit_exponential(zeros, zeros);
  CHECK(params.degenerate);
  CHECK_THROWS_AS(predict_tm(params, 0.1), NumericError);
}

TEST_CASE("predict_tm identities") {
  FitParams fit;
  fit.a = 700.0;
  fit.b = -80.0;
  fit.a_prime = 700.0;
  fit.b_prime = -80.0;
  fit.converged = true;
  for (double eps : {0.001, 0.01, 0.1, 1.0})
    CHECK(predict_tm(fit, eps) == doctest::Approx(1.0));  // identical curves

  // eps -> 0 limit is (a b) / (a' b').
  fit.a_prime = 1000.0;
  fit.b_prime = -112.0;
  CHECK(predict_tm(fit, 0.0) ==
        doctest::Approx(std::clamp((fit.a * fit.b) / (fit.a_prime * fit.b_prime), 0.0, 1.0)));

  // eps -> infinity approaches a / a'.
  CHECK(predict_tm(fit, 1000.0) == doctest::Approx(fit.a / fit.a_prime).epsilon(1e-9));

  CHECK_THROWS_AS(predict_tm(fit, -0.5), std::invalid_argument);
}
