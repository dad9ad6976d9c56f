#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mmfuse/losses.hpp"
#include "oracles.hpp"

using namespace mmfuse;

TEST_CASE("ce_loss hand values") {
  CHECK(ce_loss(RealVec({1.0, 1.0, 1.0})) == 0.0);
  CHECK(ce_loss(RealVec({0.5})) == Catch::Approx(std::log(2.0)).margin(1e-15));
  CHECK(ce_loss(RealVec({0.9, 0.8})) ==
        Catch::Approx(-std::log(0.9) - std::log(0.8)).margin(1e-15));
  CHECK(ce_loss(RealVec({0.9, 0.8})) == Catch::Approx(0.328504).margin(1e-6));
  CHECK_THROWS_AS(ce_loss(RealVec({1.5})), DataError);
  CHECK_THROWS_AS(ce_loss(RealVec({-0.1})), DataError);
}

TEST_CASE("alpha_ce_loss reductions") {
  RealVec p({0.9, 0.8, 0.3});
  CHECK(alpha_ce_loss(p, RealVec({1, 1, 1})) == ce_loss(p));
  CHECK(alpha_ce_loss(p, RealVec({0, 0, 0})) == 0.0);
  CHECK(alpha_ce_loss(RealVec({0.5}), RealVec({0.25})) ==
        Catch::Approx(0.25 * std::log(2.0)).margin(1e-15));
  CHECK_THROWS_AS(alpha_ce_loss(RealVec({0.5}), RealVec({0.1, 0.2})), DimensionError);
}

TEST_CASE("focal_loss reductions and hand values") {
  RngStream rng(3, 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> ps(16);
    for (auto& p : ps) p = 0.001 + 0.998 * rng.next_unit();
    RealVec probs(ps);
    RealVec ones(std::vector<double>(16, 1.0));
    // gamma = 0, alpha = 1 is exactly CE
    CHECK(focal_loss(probs, FocalConfig{.gamma = 0.0, .alpha = 1.0}, ones) == ce_loss(probs));
  }

  CHECK(focal_loss(RealVec({0.5}), FocalConfig{.gamma = 2.0, .alpha = 1.0}, RealVec({1.0})) ==
        Catch::Approx(0.25 * std::log(2.0)).margin(1e-15));
  const double hand = 0.5 * 0.01 * (-std::log(0.9));
  CHECK(focal_loss(RealVec({0.9}), FocalConfig{}, RealVec({0.5})) ==
        Catch::Approx(hand).margin(1e-12));
  CHECK(hand == Catch::Approx(5.268e-4).margin(1e-7));

  CHECK_THROWS_AS(focal_loss(RealVec({0.5}), FocalConfig{.gamma = -1.0, .alpha = 0.5},
                             RealVec({1.0})),
                  ConfigError);
}

TEST_CASE("focal loss is strictly decreasing in p and down-weights easy samples") {
  const FocalConfig cfg{.gamma = 2.0, .alpha = 1.0};
  double prev = focal_loss(RealVec({0.01}), cfg, RealVec({1.0}));
  for (double p = 0.02; p < 1.0; p += 0.01) {
    const double cur = focal_loss(RealVec({p}), cfg, RealVec({1.0}));
    CHECK(cur < prev);
    prev = cur;
  }
  // ratio to CE is exactly (1-p)^gamma
  for (double p : {0.9, 0.99, 0.7}) {
    const double f = focal_loss(RealVec({p}), cfg, RealVec({1.0}));
    const double c = ce_loss(RealVec({p}));
    CHECK(f / c == Catch::Approx(std::pow(1.0 - p, 2.0)).margin(1e-12));
    CHECK(f < c);
  }
}

TEST_CASE("focal_dloss_dp matches finite differences") {
  for (double gamma : {0.0, 1.0, 2.0, 3.5}) {
    for (double p : {0.05, 0.3, 0.5, 0.9, 0.99}) {
      const double alpha = 0.7;
      const double eps = 1e-7;
      auto f = [&](double q) {
        return focal_loss(RealVec({q}), FocalConfig{.gamma = gamma, .alpha = 1.0},
                          RealVec({alpha}));
      };
      const double fd = (f(p + eps) - f(p - eps)) / (2 * eps);
      CHECK(focal_dloss_dp(p, gamma, alpha) == Catch::Approx(fd).margin(1e-5));
    }
  }
}

TEST_CASE("multi_objective_loss values and properties") {
  CHECK(multi_objective_loss({2.0}) == Catch::Approx(std::log(2.0)).margin(1e-9));
  CHECK(multi_objective_loss({2.0, 8.0}) == Catch::Approx(std::log(16.0)).margin(1e-9));
  CHECK(multi_objective_loss({0.0, 0.0, 0.0}) ==
        Catch::Approx(3.0 * std::log(MULTI_EPS)).margin(1e-9));
  CHECK(std::isfinite(multi_objective_loss({0.0})));
  CHECK_THROWS_AS(multi_objective_loss({-1.0}), DataError);

  // exp of the loss is the product of the sums, not their mean
  RngStream rng(9, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const double a = 0.1 + 10.0 * rng.next_unit();
    const double b = 0.1 + 10.0 * rng.next_unit();
    const double prod = std::exp(multi_objective_loss({a, b}));
    CHECK(prod == Catch::Approx(a * b).epsilon(1e-9));
    CHECK(prod != Catch::Approx(a + b).epsilon(1e-3));
  }
}

TEST_CASE("noise_variance_mle closed form") {
  CHECK(noise_variance_mle({3.0, 4.0}) == 12.5);
  CHECK(noise_variance_mle({0.0, 0.0, 0.0}) == 0.0);
  CHECK_THROWS_AS(noise_variance_mle({}), DataError);
}

TEST_CASE("noise_variance_mle minimizes the Gaussian NLL") {
  RngStream rng(11, 0);
  const double grid_step = (std::log(1e3) - std::log(1e-3)) / 1999.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> residuals(8 + trial % 5);
    for (auto& r : residuals) r = 3.0 * (2.0 * rng.next_unit() - 1.0);
    const double closed = noise_variance_mle(residuals);
    const double grid = oracles::nll_grid_argmin(residuals, 1e-3, 1e3, 2000);
    CHECK(std::abs(std::log(grid) - std::log(closed)) <= grid_step);

    // numeric stationarity at the closed form
    const double h = 1e-5 * closed;
    const double d = (oracles::gaussian_nll(residuals, closed + h) -
                      oracles::gaussian_nll(residuals, closed - h)) /
                     (2 * h);
    CHECK(std::abs(d) < 1e-8);
  }
}

TEST_CASE("adding zero-residual samples leaves the multi term unchanged") {
  const double base = multi_objective_loss({3.7, 0.9});
  // a zero-residual sample adds exactly zero to each sum
  CHECK(multi_objective_loss({3.7 + 0.0, 0.9 + 0.0}) == base);
}

TEST_CASE("combined_loss single-task and multitask modes") {
  // two samples, two classes, uniform predictions
  std::vector<RealVec> probs = {RealVec({0.5, 0.5}), RealVec({0.5, 0.5})};
  std::vector<std::size_t> labels = {0, 1};

  LossConfig single;
  single.focal = {FocalConfig{}};
  single.include_multi = false;
  auto bd = combined_loss({probs}, {labels}, single);
  // argmax of a uniform vector is class 0: alpha for sample 0, 1-alpha for sample 1,
  // both 0.5 at the default alpha
  const double expect_focal =
      focal_loss(RealVec({0.5, 0.5}), FocalConfig{}, RealVec({0.5, 0.5}));
  CHECK(bd.focal_per_task[0] == Catch::Approx(expect_focal).margin(1e-15));
  CHECK(bd.multi == 0.0);
  CHECK(bd.total == bd.focal_per_task[0]);

  // four tasks with identical uniform batches; chain the component values by hand
  std::vector<std::vector<RealVec>> all_probs(4, probs);
  std::vector<std::vector<std::size_t>> all_labels(4, labels);
  LossConfig multi;
  multi.focal = std::vector<FocalConfig>(4, FocalConfig{});
  auto full = combined_loss(all_probs, all_labels, multi);
  // residuals per sample: (1-0.5)^2 + (0-0.5)^2 = 0.5, two samples -> S_t = 1
  for (int t = 0; t < 4; ++t) {
    CHECK(full.residual_sq_sums[t] == Catch::Approx(1.0).margin(1e-15));
    CHECK(full.sigma_sq[t] == Catch::Approx(0.5).margin(1e-15));
    CHECK(full.focal_per_task[t] == Catch::Approx(expect_focal).margin(1e-15));
  }
  const double expect_multi = 4.0 * std::log(1.0 + MULTI_EPS);
  CHECK(full.multi == Catch::Approx(expect_multi).margin(1e-12));
  CHECK(full.total == Catch::Approx(expect_multi + 4.0 * expect_focal).margin(1e-12));

  // total always decomposes exactly
  double recomposed = full.multi;
  for (double f : full.focal_per_task) recomposed += f;
  CHECK(full.total == Catch::Approx(recomposed).margin(1e-12));
}

TEST_CASE("combined_loss with all alphas zero leaves only the multi term") {
  std::vector<RealVec> probs = {RealVec({0.7, 0.3}), RealVec({0.2, 0.8})};
  std::vector<std::size_t> labels = {0, 1};
  LossConfig cfg;
  cfg.focal = {FocalConfig{.gamma = 2.0, .alpha = 0.0}};
  auto bd = combined_loss({probs}, {labels}, cfg);
  // with alpha = 0 every correct-argmax sample gets weight 0; here both
  // predictions match the labels, so the focal term vanishes
  CHECK(bd.focal_per_task[0] == 0.0);
  CHECK(bd.total == bd.multi);
}

TEST_CASE("combined_loss rejects bad labels") {
  std::vector<RealVec> probs = {RealVec({0.7, 0.3})};
  LossConfig cfg;
  CHECK_THROWS_AS(combined_loss({probs}, {{2}}, cfg), DataError);
}
