#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "repud/attacks.hpp"

using namespace repud;

namespace {

// overlapping blobs plus a wide MLP trained long enough to memorize, so
// member losses sit visibly below fresh-sample losses
struct AttackFixture {
  Dataset train;
  Dataset validation;
  ModelSpec spec = ModelSpec::mlp({4, 24, 2});
  Hyperparams hp;
  ParamVector theta_star;

  AttackFixture() {
    train = synth_gaussian(60, 4, 2, 51, 1.2);
    validation = synth_gaussian(30, 4, 2, 52, 1.2);
    hp.step_size = 0.4;
    hp.batch_size = 6;
    hp.total_steps = 600;
    PoLManifest m;
    m.spec = spec;
    m.hp = hp;
    m.init_seed = 2;
    m.schedule_seed = 3;
    m.n = train.n;
    theta_star = record_training(train, m).final_params;
  }
};

}  // namespace

TEST_CASE("max_accuracy_threshold equals the exhaustive sweep") {
  Rng rng(88);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> in_scores(5 + rng.below(20)), out_scores(5 + rng.below(20));
    for (auto& s : in_scores) s = rng.normal() + 1.0;
    for (auto& s : out_scores) s = rng.normal();
    const double fast = max_accuracy_threshold(in_scores, out_scores);
    const double slow = test::threshold_oracle(in_scores, out_scores);
    // both must achieve the same (optimal) accuracy
    const auto acc = [&](double t) {
      std::size_t c = 0;
      for (const double s : in_scores) c += s >= t ? 1 : 0;
      for (const double s : out_scores) c += s < t ? 1 : 0;
      return c;
    };
    CHECK(acc(fast) == acc(slow));
  }
}

TEST_CASE("max_accuracy threshold is at least majority accuracy") {
  const std::vector<double> in_scores{0.0, 0.1, 0.2};
  const std::vector<double> out_scores{0.05};
  const double t = max_accuracy_threshold(in_scores, out_scores);
  std::size_t correct = 0;
  for (const double s : in_scores) correct += s >= t ? 1 : 0;
  for (const double s : out_scores) correct += s < t ? 1 : 0;
  CHECK(correct * 2 >= in_scores.size() + out_scores.size());
}

TEST_CASE("fixed_fpr_threshold hits the requested quantile") {
  SUBCASE("fpr=0.5 on odd-sized population is the median") {
    CHECK(fixed_fpr_threshold({5.0, 1.0, 3.0, 2.0, 4.0}, 0.5) == 3.0);
  }
  SUBCASE("10 percent of the population lands above, within one sample") {
    std::vector<double> pop(200);
    Rng rng(7);
    for (auto& v : pop) v = rng.normal();
    const double t = fixed_fpr_threshold(pop, 0.1);
    std::size_t above = 0;
    for (const double v : pop) above += v > t ? 1 : 0;
    CHECK(above >= 19);
    CHECK(above <= 21);
  }
  SUBCASE("degenerate inputs are rejected") {
    CHECK_THROWS_AS(fixed_fpr_threshold({}, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(fixed_fpr_threshold({1.0}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(fixed_fpr_threshold({1.0}, 1.0), std::invalid_argument);
  }
}

TEST_CASE("xent score: confident-correct is maximal, uniform is -ln c") {
  const auto spec = ModelSpec::logreg(2, 2);
  // strongly positive score on class 1
  const ParamVector confident{8.0, 8.0, 0.0};
  const std::vector<double> x{2.0, 2.0};
  const double s = xent_score(confident, spec, x.data(), 1);
  CHECK(s > -1e-6);   // cross entropy -> 0 from below
  CHECK(s <= 0.0);    // scores are -crossentropy <= 0

  const ParamVector zeros(3, 0.0);
  CHECK(xent_score(zeros, spec, x.data(), 0) == doctest::Approx(-std::log(2.0)));

  const auto spec3 = ModelSpec::logreg(2, 3);
  const ParamVector zeros3(spec3.param_count(), 0.0);
  CHECK(xent_score(zeros3, spec3, x.data(), 2) == doctest::Approx(-std::log(3.0)));
}

TEST_CASE("mentr values at the three reference points") {
  SUBCASE("fully confident correct: 0") {
    const double probs[2] = {0.0, 1.0};
    CHECK(mentr_value(probs, 2, 1) == doctest::Approx(0.0));
  }
  SUBCASE("uniform binary: log 2") {
    const double probs[2] = {0.5, 0.5};
    CHECK(mentr_value(probs, 2, 0) == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("vanishing true-class probability diverges") {
    const double probs[2] = {1.0 - 1e-9, 1e-9};
    CHECK(mentr_value(probs, 2, 1) > 15.0);
  }
}

TEST_CASE("lira log ratio on hand fixtures") {
  SUBCASE("identical gaussians give zero for any phi") {
    const GaussFit fit{1.3, 0.7, 1.3, 0.7, 8, 8};
    CHECK(lira_log_ratio(-2.0, fit) == doctest::Approx(0.0));
    CHECK(lira_log_ratio(5.0, fit) == doctest::Approx(0.0));
  }
  SUBCASE("mu_in=2, mu_out=0, unit sigmas, phi=1: normalizations cancel") {
    const GaussFit fit{2.0, 1.0, 0.0, 1.0, 8, 8};
    CHECK(lira_log_ratio(1.0, fit) == doctest::Approx(0.0));
  }
  SUBCASE("phi at mu_in with equal sigmas and mu_in > mu_out is positive") {
    const GaussFit fit{2.0, 1.0, 0.0, 1.0, 8, 8};
    CHECK(lira_log_ratio(2.0, fit) > 0.0);
  }
}

TEST_CASE("fit_gaussians floors degenerate variances") {
  const auto fit = fit_gaussians({1.0, 1.0, 1.0}, {0.0, 2.0});
  CHECK(fit.sd_in == 1e-6);
  CHECK(fit.mu_in == doctest::Approx(1.0));
  CHECK(fit.mu_out == doctest::Approx(1.0));
  CHECK(fit.sd_out == doctest::Approx(1.0));
}

TEST_CASE("train_shadows: membership counts are binomial around s/2") {
  const Dataset pool = synth_gaussian(80, 4, 2, 61, 3.0);
  Hyperparams hp;
  hp.step_size = 0.3;
  hp.batch_size = 4;
  hp.total_steps = 20;
  const auto spec = ModelSpec::logreg(4, 2);
  const ShadowSet shadows = train_shadows(pool, 16, spec, hp, 5, 2);
  REQUIRE(shadows.shadows.size() == 16);

  // each shadow trains on exactly half the pool
  for (const auto& sm : shadows.shadows) {
    std::size_t members = 0;
    for (const auto m : sm.member) members += m;
    CHECK(members == 40);
  }
  // per-sample IN count is Binomial(16, 1/2): mean 8, sigma 2; allow 4 sigma
  for (std::size_t i = 0; i < pool.n; ++i) {
    int in_count = 0;
    for (const auto& sm : shadows.shadows) in_count += sm.member[i];
    CHECK(in_count >= 0);
    CHECK(std::abs(in_count - 8) <= 8);
  }
  // deterministic given the seed
  const ShadowSet again = train_shadows(pool, 16, spec, hp, 5, 1);
  for (std::size_t s = 0; s < 16; ++s) {
    CHECK(again.shadows[s].member == shadows.shadows[s].member);
    CHECK(again.shadows[s].params == shadows.shadows[s].params);
  }
}

TEST_CASE("attack_lira demands two shadows on each side") {
  const Dataset pool = synth_gaussian(20, 4, 2, 62, 3.0);
  ShadowSet shadows;
  shadows.spec = ModelSpec::logreg(4, 2);
  shadows.pool_n = pool.n;
  // three shadows, sample 0 a member of exactly one
  for (int s = 0; s < 3; ++s) {
    ShadowModel sm;
    sm.params = init_params(shadows.spec, s);
    sm.member.assign(pool.n, s == 0 ? 1 : 0);
    shadows.shadows.push_back(std::move(sm));
  }
  const ParamVector target = init_params(shadows.spec, 9);
  CHECK_THROWS_AS(
      attack_lira(target, shadows.spec, pool, 0, 0, shadows, 0.0),
      std::invalid_argument);
}

TEST_CASE("attack suite: calibrated attacks separate members from fresh samples") {
  const AttackFixture f;
  AttackSuiteConfig cfg;
  cfg.shadow_count = 8;
  cfg.shadow_seed = 404;
  cfg.shadow_steps = 600;
  const AttackSuite suite = AttackSuite::build(f.train, f.validation, f.spec, f.hp,
                                               f.theta_star, cfg, 2);

  // scores oriented higher-is-member: mean member score above mean non-member
  for (const AttackKind kind :
       {AttackKind::Xent, AttackKind::MEntr, AttackKind::LiRA, AttackKind::EnhancedMia}) {
    double member_mean = 0.0, fresh_mean = 0.0;
    for (long long i = 0; i < 30; ++i) {
      member_mean += suite.score(kind, f.theta_star, i).score;
      fresh_mean +=
          suite.score(kind, f.theta_star, static_cast<long long>(f.train.n) + i).score;
    }
    CHECK(member_mean / 30.0 > fresh_mean / 30.0);
  }

  // determinism of the whole calibration
  const AttackSuite again = AttackSuite::build(f.train, f.validation, f.spec, f.hp,
                                               f.theta_star, cfg, 1);
  CHECK(again.xent_cal.per_label == suite.xent_cal.per_label);
  CHECK(again.mentr_cal.per_label == suite.mentr_cal.per_label);
  CHECK(again.lira_cal.global == suite.lira_cal.global);
  CHECK(again.emia_cal.global == suite.emia_cal.global);
  for (long long i = 0; i < 10; ++i) {
    CHECK(again.score(AttackKind::LiRA, f.theta_star, i).score ==
          suite.score(AttackKind::LiRA, f.theta_star, i).score);
  }
}

TEST_CASE("enhanced MIA threshold lets ~fpr of the population through") {
  const AttackFixture f;
  AttackSuiteConfig cfg;
  cfg.shadow_count = 4;
  cfg.shadow_seed = 11;
  cfg.shadow_steps = 30;
  cfg.enhanced_fpr = 0.1;
  const AttackSuite suite = AttackSuite::build(f.train, f.validation, f.spec, f.hp,
                                               f.theta_star, cfg, 2);
  std::size_t flagged = 0;
  for (std::size_t j = 0; j < f.validation.n; ++j) {
    const auto s = suite.score(AttackKind::EnhancedMia, f.theta_star,
                               static_cast<long long>(f.train.n + j));
    flagged += s.prediction ? 1 : 0;
  }
  // 10% of 30 = 3, plus the boundary sample
  CHECK(flagged >= 3);
  CHECK(flagged <= 4);
}

TEST_CASE("mi_disagreement is empty for identical models") {
  const AttackFixture f;
  AttackSuiteConfig cfg;
  cfg.shadow_count = 4;
  cfg.shadow_seed = 12;
  cfg.shadow_steps = 30;
  const AttackSuite suite = AttackSuite::build(f.train, f.validation, f.spec, f.hp,
                                               f.theta_star, cfg, 2);
  std::vector<long long> probes{0, 1, 2, 60, 61};
  CHECK(mi_disagreement(suite, AttackKind::Xent, f.theta_star, f.theta_star, probes)
            .empty());

  // a very different model must disagree somewhere on member probes
  ParamVector other = f.theta_star;
  for (auto& v : other) v = -v;
  std::vector<long long> members;
  for (long long i = 0; i < 30; ++i) members.push_back(i);
  CHECK(!mi_disagreement(suite, AttackKind::Xent, f.theta_star, other, members).empty());
}

TEST_CASE("xent/enhanced-mia scores never decrease when the loss decreases") {
  // score = -loss, so this is monotonicity of negation
  const auto spec = ModelSpec::logreg(2, 2);
  const std::vector<double> x{1.0, 0.5};
  ParamVector weak{0.2, 0.1, 0.0};
  ParamVector strong{2.0, 1.0, 0.0};
  const double weak_score = xent_score(weak, spec, x.data(), 1);
  const double strong_score = xent_score(strong, spec, x.data(), 1);
  CHECK(strong_score > weak_score);
}

TEST_CASE("calibration serialization round trips") {
  Calibration cal;
  cal.method = CalibMethod::MaxAccuracy;
  cal.per_label_mode = true;
  cal.per_label = {0.5, -1.25, 3.0};
  cal.label_set = {1, 1, 0};
  const auto j = cal.to_json();
  const Calibration back = Calibration::from_json(j);
  CHECK(back.per_label == cal.per_label);
  CHECK(back.label_set == cal.label_set);
  CHECK(back.per_label_mode);
  CHECK(back.threshold_for(1) == -1.25);
  CHECK_THROWS_AS(back.threshold_for(2), std::invalid_argument);
}
