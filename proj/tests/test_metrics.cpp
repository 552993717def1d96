#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "repud/forge.hpp"
#include "repud/metrics.hpp"

using namespace repud;

TEST_CASE("metric_model_distance: scaled squared distance") {
  CHECK(metric_model_distance({1.0, 2.0}, {1.0, 2.0}) == 0.0);
  CHECK(metric_model_distance({1.0, 0.0}, {0.0, 1.0}) == doctest::Approx(1.0));

  // invariant under a common permutation
  const ParamVector a{0.5, -1.0, 2.0, 0.25};
  const ParamVector b{0.1, 0.4, -0.7, 1.0};
  const ParamVector a_perm{0.25, 2.0, -1.0, 0.5};
  const ParamVector b_perm{1.0, -0.7, 0.4, 0.1};
  CHECK(metric_model_distance(a, b) == doctest::Approx(metric_model_distance(a_perm, b_perm)));
  CHECK_THROWS_AS(metric_model_distance({1.0}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("metric_prediction_diff counts disagreeing pairs per setting") {
  // synthetic predictor: model[0] encodes the answer for every probe
  const auto predict = [](const ParamVector& model, long long id) {
    return model[0] > 0.5 || (model.size() > 1 && model[1] > 0.5 && id == 42);
  };
  const std::vector<std::vector<std::uint32_t>> groups{{1}, {2}, {3}, {4}};
  ProbePlan plan;
  for (int g = 0; g < 4; ++g) {
    plan.diff.push_back({g + 1});
    plan.common.push_back({10, 11});
    plan.validation.push_back({42});
  }
  const ParamVector theta_star{0.0, 0.0};

  SUBCASE("identical models disagree nowhere") {
    const std::vector<ParamVector> forged(4, theta_star);
    const auto out = metric_prediction_diff(predict, theta_star, forged, plan);
    CHECK(out.diff_pct == 0.0);
    CHECK(out.common_pct == 0.0);
    CHECK(out.validation_pct == 0.0);
    CHECK(out.pairs == 4);
  }
  SUBCASE("one adversarial flip is exactly one pair over the pair count") {
    std::vector<ParamVector> forged(4, theta_star);
    forged[2] = {0.0, 1.0};  // flips probe id 42 only -> validation setting
    const auto out = metric_prediction_diff(predict, theta_star, forged, plan);
    CHECK(out.diff_pct == 0.0);
    CHECK(out.common_pct == 0.0);
    CHECK(out.validation_pct == doctest::Approx(25.0));
    CHECK(out.validation_disagreements == 1);
  }
  SUBCASE("an everywhere-different model counts once per pair per setting") {
    const std::vector<ParamVector> forged(4, ParamVector{1.0, 0.0});
    const auto out = metric_prediction_diff(predict, theta_star, forged, plan);
    CHECK(out.diff_pct == 100.0);
    CHECK(out.common_pct == 100.0);
    CHECK(out.validation_pct == 100.0);
  }
}

TEST_CASE("metric_score_diff is symmetric and zero on identical scores") {
  CHECK(metric_score_diff(1.25, 1.25) == 0.0);
  CHECK(metric_score_diff(2.0, -1.0) == metric_score_diff(-1.0, 2.0));
  CHECK(metric_score_diff(2.0, -1.0) == 3.0);
}

TEST_CASE("metric_uniformity: loop schedules are exact, everything is below 2") {
  // full epochs: every sample appears exactly `epochs` times
  const BatchSchedule sched = make_schedule(12, 3, 5, 3, false);
  CHECK(metric_uniformity(sched.batches, 12) == 0.0);

  // a maximally skewed sequence stays below the total-variation bound of 2
  std::vector<MiniBatchSpec> skewed(10, MiniBatchSpec::make_plain({0, 1}));
  const double skew = metric_uniformity(skewed, 100);
  CHECK(skew > 0.0);
  CHECK(skew <= 2.0);

  // independent per-step sampling lands strictly between
  const auto independent = make_independent_batches(40, 4, 50, 9, false);
  const double ind = metric_uniformity(independent, 40);
  CHECK(ind > 0.0);
  CHECK(ind < skew);
}

TEST_CASE("metric_freq_profile is sorted, sums to one") {
  const auto independent = make_independent_batches(30, 3, 40, 5, false);
  const auto profile = metric_freq_profile(independent, 30);
  REQUIRE(profile.size() == 30);
  double sum = 0.0;
  for (std::size_t i = 0; i < profile.size(); ++i) {
    sum += profile[i];
    if (i > 0) CHECK(profile[i] <= profile[i - 1]);
  }
  CHECK(sum == doctest::Approx(1.0));
}

TEST_CASE("forged profiles sit between the loop and independent profiles") {
  // small end-to-end forge to get a real forged sequence
  const std::size_t n = 24;
  const Dataset ds = synth_gaussian(n, 3, 2, 5, 2.5);
  PoLManifest m;
  m.spec = ModelSpec::logreg(3, 2);
  m.hp.step_size = 0.2;
  m.hp.batch_size = 4;
  m.hp.total_steps = 30;  // five epochs
  m.init_seed = 1;
  m.schedule_seed = 2;
  m.n = n;
  const auto trained = record_training(ds, m);
  ForgeConfig cfg;
  cfg.mu = 6;
  cfg.kappa = 2;
  cfg.group_size = 1;
  cfg.seed = 3;
  const SplitPlan plan = make_split_plan(n, 1, 2, 30, 4);
  const auto store = forge_all(trained.log, ds, plan, cfg, nullptr, 2);

  std::vector<MiniBatchSpec> original_seq;
  for (const auto& r : trained.log.steps) original_seq.push_back(r.batch);
  CHECK(metric_uniformity(original_seq, n) == 0.0);

  double forged_mean = 0.0;
  for (std::size_t g = 0; g < store.group_count(); ++g) {
    forged_mean += metric_uniformity(store.sequence_for_group(g), n);
  }
  forged_mean /= static_cast<double>(store.group_count());

  const auto independent = make_independent_batches(n, 4, 30, 6, false);
  const double ind = metric_uniformity(independent, n);

  CHECK(forged_mean > 0.0);
  CHECK(forged_mean < ind);
}
