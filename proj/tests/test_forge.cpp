#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "repud/forge.hpp"

using namespace repud;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir() {
  static int counter = 0;
  const auto dir =
      fs::temp_directory_path() / ("repud_forge_test_" + std::to_string(counter++));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Fixture {
  Dataset ds;
  PoLLog log;
};

Fixture logreg_fixture(std::size_t n, int b, long long tau, std::uint64_t seed = 3) {
  Fixture f;
  f.ds = synth_gaussian(n, 3, 2, seed, 2.5);
  PoLManifest m;
  m.spec = ModelSpec::logreg(3, 2);
  m.hp.step_size = 0.2;
  m.hp.batch_size = b;
  m.hp.total_steps = tau;
  m.init_seed = seed + 1;
  m.schedule_seed = seed + 2;
  m.n = n;
  f.log = record_training(f.ds, m).log;
  return f;
}

}  // namespace

TEST_CASE("candidate_argmin picks a zero-distance self match") {
  const auto f = logreg_fixture(10, 2, 2);
  const ParamVector& theta = f.log.checkpoint(0);
  const auto& orig_batch = f.log.steps[0].batch;
  const auto orig = loss_and_grad(theta, f.log.manifest.spec, orig_batch, f.ds, 0.0);
  std::vector<MiniBatchSpec> candidates{MiniBatchSpec::make_plain({0, 5}), orig_batch,
                                        MiniBatchSpec::make_plain({1, 7})};
  const auto [best, dist] = candidate_argmin(theta, orig.grad, candidates,
                                             f.log.manifest.spec, f.ds, 0.0);
  CHECK(best == 1);
  CHECK(dist == 0.0);
}

TEST_CASE("candidate_argmin with one candidate returns index zero") {
  const auto f = logreg_fixture(10, 2, 2);
  const ParamVector& theta = f.log.checkpoint(0);
  const auto orig =
      loss_and_grad(theta, f.log.manifest.spec, f.log.steps[0].batch, f.ds, 0.0);
  std::vector<MiniBatchSpec> candidates{MiniBatchSpec::make_plain({3, 4})};
  const auto [best, dist] = candidate_argmin(theta, orig.grad, candidates,
                                             f.log.manifest.spec, f.ds, 0.0);
  CHECK(best == 0);
  CHECK(dist > 0.0);
}

TEST_CASE("candidate_argmin equals an independently coded exhaustive evaluation") {
  Rng rng(404);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 50;
    const Dataset ds = synth_gaussian(n, 3, 2, 1000 + trial, 2.0);
    const ModelSpec spec = ModelSpec::logreg(3, 2);
    ParamVector theta = init_params(spec, rng.next_u64());
    const auto orig_batch = MiniBatchSpec::make_plain(rng.sample_distinct(n, 5));
    const auto orig = loss_and_grad(theta, spec, orig_batch, ds, 0.0);

    std::vector<MiniBatchSpec> candidates;
    for (int m = 0; m < 20; ++m) {
      candidates.push_back(MiniBatchSpec::make_plain(rng.sample_distinct(n, 5)));
    }
    const auto [best, dist] = candidate_argmin(theta, orig.grad, candidates, spec, ds,
                                               0.0, 2);
    const auto [oracle_best, oracle_dist] =
        test::argmin_oracle(theta, candidates, orig.grad, ds, 0.0);
    CHECK(best == oracle_best);
    CHECK(dist == doctest::Approx(oracle_dist).epsilon(1e-9));
  }
}

TEST_CASE("candidate_argmin breaks ties toward the lowest index") {
  const auto f = logreg_fixture(10, 2, 2);
  const ParamVector& theta = f.log.checkpoint(0);
  const auto orig =
      loss_and_grad(theta, f.log.manifest.spec, f.log.steps[0].batch, f.ds, 0.0);
  const auto same = MiniBatchSpec::make_plain({2, 6});
  std::vector<MiniBatchSpec> candidates{same, same, same};
  const auto [best, dist] = candidate_argmin(theta, orig.grad, candidates,
                                             f.log.manifest.spec, f.ds, 0.0);
  CHECK(best == 0);
  CHECK(dist >= 0.0);
}

TEST_CASE("forge_pointwise excludes the target and matches exhaustive search") {
  const auto f = logreg_fixture(3, 1, 3, 9);
  ForgeConfig cfg;
  cfg.mu = 20;  // covers both remaining points at this seed
  cfg.kappa = 1;
  cfg.group_size = 1;
  cfg.seed = 21;
  CostCounters counters;
  const auto out = forge_pointwise(f.log, f.ds, 0, cfg, &counters, 1);

  REQUIRE(out.batches.size() == 3);
  for (long long t = 1; t <= 3; ++t) {
    const auto& batch = out.batches[static_cast<std::size_t>(t - 1)];
    CHECK(!batch.contains(0));

    // exhaustive: the two remaining singleton batches, via the test oracle
    const ParamVector& theta = f.log.checkpoint(t - 1);
    const auto orig = test::logreg_grad_oracle(
        theta, f.ds, f.log.steps[static_cast<std::size_t>(t - 1)].batch, 0.0);
    double best = std::numeric_limits<double>::infinity();
    for (std::uint32_t i = 1; i <= 2; ++i) {
      const auto gi =
          test::logreg_grad_oracle(theta, f.ds, MiniBatchSpec::make_plain({i}), 0.0);
      double dist = 0.0;
      for (std::size_t j = 0; j < gi.size(); ++j) {
        dist += (gi[j] - orig[j]) * (gi[j] - orig[j]);
      }
      best = std::min(best, dist);
    }
    CHECK(out.dist_sq[static_cast<std::size_t>(t - 1)] ==
          doctest::Approx(best).epsilon(1e-9));
  }
  CHECK(counters.phase1_candidate_evals.load() == 20 * 3);
  CHECK(counters.phase1_original_evals.load() == 3);
}

TEST_CASE("forge_pointwise rejects impossible batch sizes") {
  const auto f = logreg_fixture(3, 3, 2, 15);
  ForgeConfig cfg;
  cfg.mu = 2;
  CHECK_THROWS_AS(forge_pointwise(f.log, f.ds, 0, cfg, nullptr, 1), ConfigError);
}

TEST_CASE("forge_all invariants, cost counters, and store views") {
  const std::size_t n = 24;
  const auto f = logreg_fixture(n, 4, 6, 31);
  ForgeConfig cfg;
  cfg.mu = 6;
  cfg.kappa = 3;
  cfg.group_size = 2;
  cfg.seed = 77;
  const SplitPlan plan = make_split_plan(n, 2, 3, 6, 99);
  CostCounters counters;
  const auto store = forge_all(f.log, f.ds, plan, cfg, &counters, 2);

  CHECK(counters.phase1_candidate_evals.load() == 3 * 6 * 6);  // kappa*mu*tau
  CHECK(counters.phase1_original_evals.load() == 6);           // + tau

  for (std::size_t g = 0; g < store.group_count(); ++g) {
    for (long long t = 1; t <= 6; ++t) {
      const auto e = store.entry(g, t);
      const auto& group = plan.groups[g];
      const bool orig_hits_group =
          f.log.steps[static_cast<std::size_t>(t - 1)].batch.intersects(group);
      CHECK(e.replaced == orig_hits_group);
      if (e.replaced) {
        CHECK(!e.batch->intersects(group));
        CHECK(e.grad_dist_sq > 0.0);
      } else {
        CHECK(*e.batch == f.log.steps[static_cast<std::size_t>(t - 1)].batch);
        CHECK(e.grad_dist_sq == 0.0);
      }
    }
  }
}

TEST_CASE("forge_all_full reduces to forge_all on a plain manifest") {
  const std::size_t n = 12;
  const auto f = logreg_fixture(n, 2, 4, 41);
  ForgeConfig cfg;
  cfg.mu = 4;
  cfg.kappa = 2;
  cfg.group_size = 1;
  cfg.seed = 5;
  const SplitPlan plan = make_split_plan(n, 1, 2, 4, 6);
  const auto a = forge_all(f.log, f.ds, plan, cfg, nullptr, 1);
  const auto b = forge_all_full(f.log, f.ds, plan, cfg, nullptr, 1);
  CHECK(a.argmin_batch == b.argmin_batch);
  CHECK(a.argmin_dist_sq == b.argmin_dist_sq);
}

TEST_CASE("forge_all refuses augmented or modified-SGD manifests") {
  const std::size_t n = 12;
  Dataset ds = synth_gaussian(n, 3, 2, 8, 2.0);
  PoLManifest m;
  m.spec = ModelSpec::logreg(3, 2);
  m.hp.step_size = 0.1;
  m.hp.batch_size = 2;
  m.hp.total_steps = 2;
  m.hp.momentum = 0.9;
  m.n = n;
  const auto log = record_training(ds, m).log;
  const SplitPlan plan = make_split_plan(n, 1, 2, 2, 6);
  ForgeConfig cfg;
  cfg.mu = 2;
  cfg.kappa = 2;
  cfg.group_size = 1;
  CHECK_THROWS_AS(forge_all(log, ds, plan, cfg, nullptr, 1), ConfigError);
  CHECK_NOTHROW(forge_all_full(log, ds, plan, cfg, nullptr, 1));
}

TEST_CASE("the weight-decay term cancels out of the argmin choice") {
  const std::size_t n = 16;
  const Dataset ds = synth_gaussian(n, 3, 2, 77, 2.0);
  const ModelSpec spec = ModelSpec::logreg(3, 2);
  const ParamVector theta = init_params(spec, 5);
  Rng rng(13);
  const auto orig_batch = MiniBatchSpec::make_plain(rng.sample_distinct(n, 4));
  std::vector<MiniBatchSpec> candidates;
  for (int m = 0; m < 8; ++m) {
    candidates.push_back(MiniBatchSpec::make_plain(rng.sample_distinct(n, 4)));
  }
  const double wd = 5e-2;
  const auto orig_plain = loss_and_grad(theta, spec, orig_batch, ds, 0.0);
  const auto orig_decay = loss_and_grad(theta, spec, orig_batch, ds, wd);
  const auto plain =
      candidate_argmin(theta, orig_plain.grad, candidates, spec, ds, 0.0);
  const auto decayed =
      candidate_argmin(theta, orig_decay.grad, candidates, spec, ds, wd);
  CHECK(plain.first == decayed.first);
  CHECK(plain.second == doctest::Approx(decayed.second).epsilon(1e-9));
}

TEST_CASE("reconstruct_por: untouched groups reproduce theta_star bitwise") {
  // tau=2 with b=2 touches only 4 of the 12 samples, so some group of two
  // is never sampled and its forged sequence equals the original log
  const std::size_t n = 12;
  const auto f = logreg_fixture(n, 2, 2, 55);
  ForgeConfig cfg;
  cfg.mu = 3;
  cfg.kappa = 2;
  cfg.group_size = 2;
  cfg.seed = 5;
  const SplitPlan plan = make_split_plan(n, 2, 2, 2, 91);
  const auto store = forge_all(f.log, f.ds, plan, cfg, nullptr, 1);

  std::vector<std::uint32_t> touched;
  for (const auto& rec : f.log.steps) {
    touched.insert(touched.end(), rec.batch.indices.begin(), rec.batch.indices.end());
  }
  std::sort(touched.begin(), touched.end());

  bool found_untouched = false;
  for (std::size_t g = 0; g < store.group_count(); ++g) {
    if (!plan.groups[g].empty() &&
        !MiniBatchSpec::make_plain(touched).intersects(plan.groups[g])) {
      found_untouched = true;
      const auto por = reconstruct_por(f.log, f.ds, store, g, 1, nullptr);
      CHECK(por.replaced_steps == 0);
      CHECK(por.theta_minus == f.log.checkpoint(f.log.tau()));  // bitwise
      break;
    }
  }
  CHECK(found_untouched);
}

TEST_CASE("reconstructed PoRs verify at error zero and exclude the group") {
  const std::size_t n = 24;
  const auto f = logreg_fixture(n, 4, 8, 21);
  ForgeConfig cfg;
  cfg.mu = 6;
  cfg.kappa = 2;
  cfg.group_size = 2;
  cfg.seed = 3;
  const SplitPlan plan = make_split_plan(n, 2, 2, 8, 17);
  CostCounters counters;
  const auto store = forge_all(f.log, f.ds, plan, cfg, &counters, 1);

  for (std::size_t g = 0; g < store.group_count(); ++g) {
    const auto por = reconstruct_por(f.log, f.ds, store, g, 1, &counters);
    CHECK(exclusion_scan(por.forged_log, por.group) == 0);
    const auto report = verify_full(por.forged_log, f.ds, 0.0);
    CHECK(report.pass);
    CHECK(report.max_error == 0.0);
  }
  // phase 2: (n/lambda) * tau gradient evaluations
  CHECK(counters.phase2_evals.load() == (n / 2) * 8);
}

TEST_CASE("substituted logs verify with error lr * ||grad delta|| per step") {
  const std::size_t n = 12;
  const auto f = logreg_fixture(n, 2, 4, 71);
  ForgeConfig cfg;
  cfg.mu = 4;
  cfg.kappa = 2;
  cfg.group_size = 1;
  cfg.seed = 15;
  const SplitPlan plan = make_split_plan(n, 1, 2, 4, 19);
  const auto store = forge_all(f.log, f.ds, plan, cfg, nullptr, 1);

  const double lr = f.log.manifest.hp.step_size;
  for (std::size_t g = 0; g < store.group_count(); ++g) {
    const PoLLog sub = substituted_log(f.log, store, g);
    const auto report = verify_full(sub, f.ds, 1e9);
    REQUIRE(report.segments.size() == 4);
    for (long long t = 1; t <= 4; ++t) {
      const auto e = store.entry(g, t);
      const double expected = lr * std::sqrt(e.grad_dist_sq);
      CHECK(report.segments[static_cast<std::size_t>(t - 1)].error ==
            doctest::Approx(expected).epsilon(1e-9));
    }
  }
}

TEST_CASE("forge store round trips through forge.jsonl") {
  const std::size_t n = 12;
  const auto f = logreg_fixture(n, 2, 4, 81);
  ForgeConfig cfg;
  cfg.mu = 4;
  cfg.kappa = 2;
  cfg.group_size = 2;
  cfg.seed = 7;
  const SplitPlan plan = make_split_plan(n, 2, 2, 4, cfg.seed);
  const auto store = forge_all(f.log, f.ds, plan, cfg, nullptr, 1);

  const auto path = temp_dir() / "forge.jsonl";
  write_forge_store(store, path);
  const auto back = read_forge_store(path, f.log);
  for (std::size_t g = 0; g < store.group_count(); ++g) {
    for (long long t = 1; t <= 4; ++t) {
      const auto a = store.entry(g, t);
      const auto b = back.entry(g, t);
      CHECK(a.replaced == b.replaced);
      CHECK(*a.batch == *b.batch);
      CHECK(a.grad_dist_sq == b.grad_dist_sq);
    }
  }
}

TEST_CASE("forge_insert: zero fraction leaves the trajectory untouched") {
  const std::size_t n = 12;
  const auto f = logreg_fixture(n, 3, 4, 91);
  ForgeConfig cfg;
  cfg.mu = 4;
  cfg.kappa = 1;
  cfg.group_size = 1;
  cfg.seed = 23;
  std::vector<double> x_star{0.3, -0.2, 1.4};
  const auto out = forge_insert(f.log, f.ds, x_star, 1, 0.0, cfg, nullptr, 1);
  CHECK(out.replaced_steps.empty());
  for (long long t = 1; t <= 4; ++t) {
    CHECK(out.forged_log.steps[static_cast<std::size_t>(t - 1)].batch ==
          f.log.steps[static_cast<std::size_t>(t - 1)].batch);
  }
  CHECK(out.theta_prime == f.log.checkpoint(4));  // bitwise
}

TEST_CASE("forge_insert places x_star exactly once in every replaced batch") {
  const std::size_t n = 12;
  const auto f = logreg_fixture(n, 3, 6, 101);
  ForgeConfig cfg;
  cfg.mu = 5;
  cfg.kappa = 1;
  cfg.group_size = 1;
  cfg.seed = 29;
  std::vector<double> x_star{0.1, 0.1, 0.1};
  const auto out = forge_insert(f.log, f.ds, x_star, 0, 0.5, cfg, nullptr, 1);
  CHECK(out.replaced_steps.size() == 3);  // ceil(0.5 * 6)
  const auto star = static_cast<std::uint32_t>(n);
  for (const long long t : out.replaced_steps) {
    const auto& batch = out.forged_log.steps[static_cast<std::size_t>(t - 1)].batch;
    CHECK(std::count(batch.indices.begin(), batch.indices.end(), star) == 1);
  }
  // untouched steps keep the original batches
  for (long long t = 1; t <= 6; ++t) {
    if (std::find(out.replaced_steps.begin(), out.replaced_steps.end(), t) ==
        out.replaced_steps.end()) {
      CHECK(out.forged_log.steps[static_cast<std::size_t>(t - 1)].batch ==
            f.log.steps[static_cast<std::size_t>(t - 1)].batch);
    }
  }
  // the forged-insert log is a genuine replay over the extended dataset
  const auto report = verify_full(out.forged_log, out.extended, 0.0);
  CHECK(report.pass);
}

TEST_CASE("forge_insert substitution distances inflate for an outlier x_star") {
  const std::size_t n = 20;
  const auto f = logreg_fixture(n, 4, 8, 111);
  ForgeConfig cfg;
  cfg.mu = 8;
  cfg.kappa = 1;
  cfg.group_size = 1;
  cfg.seed = 31;
  // in-distribution: an existing sample jittered slightly
  std::vector<double> in_dist(f.ds.row(3), f.ds.row(3) + 3);
  in_dist[0] += 0.01;
  const auto a = forge_insert(f.log, f.ds, in_dist, f.ds.labels[3], 0.5, cfg, nullptr, 1);
  std::vector<double> far{40.0, -35.0, 60.0};
  const auto b = forge_insert(f.log, f.ds, far, 0, 0.5, cfg, nullptr, 1);
  double mean_a = 0.0, mean_b = 0.0;
  for (const double d : a.dist_sq) mean_a += d;
  for (const double d : b.dist_sq) mean_b += d;
  mean_a /= static_cast<double>(a.dist_sq.size());
  mean_b /= static_cast<double>(b.dist_sq.size());
  CHECK(mean_b > mean_a);
}

TEST_CASE("thm1_bound: zero-weight fixture and scaling") {
  SubspaceData sub;
  sub.data.n = 3;
  sub.data.dim = 2;
  sub.data.classes = 2;
  sub.data.features = {0.0, 1.0,   // x1 off the subspace
                       2.0, 0.0,   // on span(e1)
                       -1.5, 0.0};
  sub.data.labels = {1, 0, 1};
  sub.outlier_index = 0;
  sub.basis = {{1.0, 0.0}};

  const ParamVector w(3, 0.0);  // logreg(2,2): weight row + bias
  const auto res = thm1_bound(sub, w);
  CHECK(res.bound == doctest::Approx(0.5));
  CHECK(res.min_grad_dist >= res.bound - 1e-12);

  // scaling the off-subspace coordinate scales the bound linearly
  sub.data.features[1] = 3.0;
  const auto scaled = thm1_bound(sub, w);
  CHECK(scaled.bound == doctest::Approx(1.5));
  CHECK(scaled.min_grad_dist >= scaled.bound - 1e-12);
}

TEST_CASE("thm1_bound rejects an on-subspace outlier") {
  SubspaceData sub;
  sub.data.n = 3;
  sub.data.dim = 2;
  sub.data.classes = 2;
  sub.data.features = {1.0, 0.0, 2.0, 0.0, 3.0, 0.0};
  sub.data.labels = {1, 0, 1};
  sub.outlier_index = 0;
  sub.basis = {{1.0, 0.0}};
  CHECK_THROWS_AS(thm1_bound(sub, ParamVector(3, 0.0)), std::invalid_argument);
}

TEST_CASE("thm1_bound holds on generated subspace data") {
  Rng rng(71);
  for (int trial = 0; trial < 25; ++trial) {
    const auto sub = synth_subspace(10, 4, 500 + trial);
    ParamVector w(5);
    for (auto& v : w) v = rng.normal();
    const auto res = thm1_bound(sub, w);
    CHECK(res.min_grad_dist >= res.bound - 1e-12);
    CHECK(res.bound > 0.0);
  }
}
