#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_support.hpp"
#include "translab/attacks.hpp"
#include "translab/errors.hpp"
#include "translab/rng.hpp"

using namespace translab;
using namespace translab::testing;

namespace {

struct Fixture {
  Examples data = make_prototype_data(4, 12, 40, 0.25, 301);
  Model model = train_tiny(data, 4, 16, 77);
  AttackConfig wide_pgd() const {
    AttackConfig cfg = pgd_reference();
    cfg.epsilon = 0.25;
    cfg.step = 0.05;
    cfg.clamp_lo = -4.0;
    cfg.clamp_hi = 4.0;
    return cfg;
  }
};

}  // namespace

TEST_CASE("attack config: reference values and validation") {
  AttackConfig pgd = pgd_reference();
  CHECK(pgd.iterations == 40);
  CHECK(pgd.epsilon == doctest::Approx(8.0 / 255.0));
  CHECK(pgd.step == doctest::Approx(0.01));
  pgd.validate();

  for (double kappa : {0.0, 15.0, 30.0}) cw_reference(kappa).validate();

  AttackConfig bad = pgd_reference();
  bad.epsilon = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = pgd_reference();
  bad.step = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("pgd: eps bound, clamp and protocol") {
  Fixture fx;
  AttackConfig cfg = fx.wide_pgd();
  AdvBatch adv = pgd_attack(fx.model, fx.data.images, fx.data.labels, cfg);
  adv.check_invariants();

  std::vector<int> clean_pred = predict(fx.model, fx.data.images);
  int attacked = 0, success = 0;
  for (int i = 0; i < adv.count(); ++i) {
    CHECK(adv.linf[i] <= cfg.epsilon + 1e-6);
    for (int j = 0; j < adv.adv.dim(1); ++j) {
      CHECK(adv.adv.at(i, j) >= cfg.clamp_lo);
      CHECK(adv.adv.at(i, j) <= cfg.clamp_hi);
    }
    // Only correctly classified images are attacked.
    CHECK(static_cast<bool>(adv.attacked[i]) == (clean_pred[i] == fx.data.labels[i]));
    if (!adv.attacked[i]) {
      CHECK(adv.l2[i] == 0.0);  // untouched
      CHECK(!adv.success[i]);
    }
    attacked += adv.attacked[i];
    success += adv.success[i];
  }
  CHECK(attacked > 0);
  CHECK(success > 0);
  CHECK(success <= attacked);
}

TEST_CASE("pgd: eps = 0 returns the clean batch with zero successes") {
  Fixture fx;
  AttackConfig cfg = fx.wide_pgd();
  cfg.epsilon = 0.0;
  AdvBatch adv = pgd_attack(fx.model, fx.data.images, fx.data.labels, cfg);
  CHECK(adv.adv.values == adv.clean.values);
  for (int i = 0; i < adv.count(); ++i) CHECK(!adv.success[i]);
}

TEST_CASE("pgd: deterministic per seed and stable under subsetting via keys") {
  Fixture fx;
  AttackConfig cfg = fx.wide_pgd();
  cfg.seed = 99;
  AdvBatch a = pgd_attack(fx.model, fx.data.images, fx.data.labels, cfg);
  AdvBatch b = pgd_attack(fx.model, fx.data.images, fx.data.labels, cfg);
  CHECK(a.adv.values == b.adv.values);  // bitwise replay

  cfg.seed = 100;
  AdvBatch c = pgd_attack(fx.model, fx.data.images, fx.data.labels, cfg);
  CHECK(a.adv.values != c.adv.values);

  // Attacking a subset with the original keys reproduces those rows exactly
  // (FP model: the quantization grid does not depend on batch composition).
  std::vector<int> rows = {3, 10, 17};
  Tensor sub = Tensor::zeros({3, fx.data.images.dim(1)});
  std::vector<int> sub_labels(3);
  std::vector<std::uint64_t> keys(3);
  for (int r = 0; r < 3; ++r) {
    for (int j = 0; j < sub.dim(1); ++j) sub.at(r, j) = fx.data.images.at(rows[r], j);
    sub_labels[r] = fx.data.labels[rows[r]];
    keys[r] = static_cast<std::uint64_t>(rows[r]);
  }
  cfg.seed = 99;
  AdvBatch d = pgd_attack(fx.model, sub, sub_labels, cfg, &keys);
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < sub.dim(1); ++j)
      CHECK(d.adv.at(r, j) == a.adv.at(rows[r], j));
}

TEST_CASE("cw: margin property and kappa cost") {
  Fixture fx;
  AttackConfig cw0 = cw_reference(0.0);
  cw0.iterations = 60;
  cw0.clamp_lo = -4.0;
  cw0.clamp_hi = 4.0;
  AdvBatch adv0 = cw_l2_attack(fx.model, fx.data.images, fx.data.labels, cw0);
  adv0.check_invariants();

  AttackConfig cw2 = cw0;
  cw2.kappa = 2.0;
  AdvBatch adv2 = cw_l2_attack(fx.model, fx.data.images, fx.data.labels, cw2);

  auto margin_of = [&](const AdvBatch& adv, int i) {
    Tensor row = Tensor::zeros({1, adv.adv.dim(1)});
    for (int j = 0; j < adv.adv.dim(1); ++j) row.at(0, j) = adv.adv.at(i, j);
    Tensor logits = forward(fx.model, row);
    const int label = adv.labels[i];
    double best_wrong = -1e300;
    for (int c = 0; c < logits.dim(1); ++c)
      if (c != label) best_wrong = std::max(best_wrong, logits.at(0, c));
    return best_wrong - logits.at(0, label);
  };

  int s0 = 0, s2 = 0;
  for (int i = 0; i < adv0.count(); ++i) {
    if (adv0.success[i]) {
      ++s0;
      CHECK(margin_of(adv0, i) >= 0.0 - 1e-9);
    }
    if (adv2.success[i]) {
      ++s2;
      CHECK(margin_of(adv2, i) >= 2.0 - 1e-9);
    }
  }
  REQUIRE(s0 > 0);
  REQUIRE(s2 > 0);

  auto st0 = perturbation_stats(adv0);
  auto st2 = perturbation_stats(adv2);
  REQUIRE(st0.has_value());
  REQUIRE(st2.has_value());
  CHECK(st2->mean_l2 > st0->mean_l2);  // confidence costs perturbation
}

TEST_CASE("cw: misclassified images are excluded from generation") {
  Fixture fx;
  // Mangle one image so the model misclassifies it.
  Examples data = fx.data;
  std::vector<int> pred = predict(fx.model, data.images);
  int victim = -1;
  for (int i = 0; i < data.count(); ++i)
    if (pred[i] == data.labels[i]) {
      victim = i;
      break;
    }
  REQUIRE(victim >= 0);
  data.labels[victim] = (data.labels[victim] + 1) % 4;  // label now wrong

  AttackConfig cfg = cw_reference(0.0);
  cfg.iterations = 20;
  cfg.clamp_lo = -4.0;
  cfg.clamp_hi = 4.0;
  AdvBatch adv = cw_l2_attack(fx.model, data.images, data.labels, cfg);
  CHECK(!adv.attacked[victim]);
  CHECK(adv.l2[victim] == 0.0);
}

TEST_CASE("deepfool: closed form on a linear binary classifier") {
  // Logits (0, w.x + b): distance to the hyperplane is |w.x+b| / ||w||.
  ModelSpec spec = make_dense_spec(Family::kPlainFeedforward, 1, 3, {}, 2, 0);
  Model m = Model::init(spec);
  const std::vector<double> w = {0.6, -0.8, 0.5};
  const double b = 0.35;
  m.params[0].values = {0.0, 0.0, 0.0, w[0], w[1], w[2]};
  m.params[1].values = {0.0, b};

  Tensor x({1, 3}, {0.2, 0.4, -0.3});
  const double f = w[0] * 0.2 + w[1] * 0.4 + w[2] * (-0.3) + b;  // -0.29 -> class 0
  REQUIRE(f < 0.0);
  const double wnorm = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);

  AttackConfig cfg = deepfool_reference();
  cfg.clamp_lo = -10.0;
  cfg.clamp_hi = 10.0;
  AdvBatch adv = deepfool_attack(m, x, {0}, cfg);
  REQUIRE(adv.attacked[0]);
  CHECK(adv.success[0]);
  const double expect = std::fabs(f) / wnorm * (1.0 + cfg.overshoot);
  CHECK(adv.l2[0] == doctest::Approx(expect).epsilon(1e-4));
}

TEST_CASE("deepfool: smaller perturbations than pgd on the same model") {
  Fixture fx;
  AttackConfig df = deepfool_reference();
  df.clamp_lo = -4.0;
  df.clamp_hi = 4.0;
  AdvBatch a = deepfool_attack(fx.model, fx.data.images, fx.data.labels, df);
  AdvBatch p = pgd_attack(fx.model, fx.data.images, fx.data.labels, fx.wide_pgd());
  auto sa = perturbation_stats(a);
  auto sp = perturbation_stats(p);
  REQUIRE(sa.has_value());
  REQUIRE(sp.has_value());
  CHECK(sa->mean_linf < sp->mean_linf);
}

TEST_CASE("perturbation stats") {
  AdvBatch adv;
  adv.clean = Tensor({2, 2}, {0.0, 0.0, 1.0, 1.0});
  adv.adv = Tensor({2, 2}, {0.3, -0.4, 1.0, 1.0});
  adv.labels = {0, 1};
  adv.attacked = {1, 1};
  adv.success = {1, 0};
  adv.failed = {0, 0};
  adv.l2 = {0.5, 0.0};
  adv.linf = {0.4, 0.0};
  adv.keys = {0, 1};
  auto st = perturbation_stats(adv);
  REQUIRE(st.has_value());
  CHECK(st->successes == 1);
  CHECK(st->mean_l2 == doctest::Approx(0.5));
  CHECK(st->mean_linf == doctest::Approx(0.4));

  adv.success = {0, 0};
  CHECK(!perturbation_stats(adv).has_value());  // empty-statistics signal
}

TEST_CASE("boundary raster: center cell, shape and orthogonal basis") {
  Fixture fx;
  Tensor image = Tensor::zeros({1, 12});
  for (int j = 0; j < 12; ++j) image.at(0, j) = fx.data.images.at(0, j);
  Tensor grad = input_gradient(fx.model, image, {fx.data.labels[0]});

  BoundaryRaster raster = boundary_raster(fx.model, image, grad, 2.0, 65, 7);
  CHECK(raster.labels.size() == 65u * 65u);
  CHECK(raster.center_label == predict(fx.model, image)[0]);

  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (int j = 0; j < 12; ++j) {
    dot += raster.axis_x[j] * raster.axis_y[j];
    nx += raster.axis_x[j] * raster.axis_x[j];
    ny += raster.axis_y[j] * raster.axis_y[j];
  }
  CHECK(std::fabs(dot) <= 1e-6);
  CHECK(nx == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ny == doctest::Approx(1.0).epsilon(1e-9));

  SUBCASE("zero gradient cannot build a basis") {
    Tensor zero = Tensor::zeros({1, 12});
    CHECK_THROWS_AS(boundary_raster(fx.model, image, zero, 2.0, 9, 7), NumericError);
  }
  SUBCASE("resolution must be odd and >= 3") {
    CHECK_THROWS_AS(boundary_raster(fx.model, image, grad, 2.0, 8, 7), std::invalid_argument);
    CHECK_THROWS_AS(boundary_raster(fx.model, image, grad, 2.0, 1, 7), std::invalid_argument);
  }
}

TEST_CASE("adv batch archive round-trips and rejects corruption") {
  Fixture fx;
  AttackConfig cfg = fx.wide_pgd();
  cfg.iterations = 5;
  AdvBatch adv = pgd_attack(fx.model, fx.data.images, fx.data.labels, cfg);

  const std::string path = (std::filesystem::temp_directory_path() / "tl_adv_test.bin").string();
  save_adv_batch(path, adv);
  AdvBatch loaded = load_adv_batch(path);
  CHECK(loaded.adv.values == adv.adv.values);
  CHECK(loaded.clean.values == adv.clean.values);
  CHECK(loaded.success == adv.success);
  CHECK(loaded.keys == adv.keys);

  // Bad magic.
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "not an archive";
  }
  CHECK_THROWS_AS(load_adv_batch(path), DataError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_adv_batch(path), DataError);
}
