#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "repud/model.hpp"

using namespace repud;

namespace {

Dataset tiny_dataset(std::vector<std::vector<double>> rows, std::vector<int> labels,
                     int classes) {
  Dataset ds;
  ds.n = rows.size();
  ds.dim = rows.front().size();
  ds.classes = classes;
  for (const auto& r : rows) ds.features.insert(ds.features.end(), r.begin(), r.end());
  ds.labels = std::move(labels);
  ds.validate();
  return ds;
}

}  // namespace

TEST_CASE("param counts follow the flattened layout") {
  CHECK(ModelSpec::logreg(2, 2).param_count() == 3);
  CHECK(ModelSpec::logreg(5, 3).param_count() == 18);
  CHECK(ModelSpec::mlp({4, 3, 2}).param_count() == 4 * 3 + 3 + 3 * 2 + 2);
  // conv stage: 4 filters over 1 channel + bias, then fc from 4*4*4
  const auto cnn = ModelSpec::small_cnn({8, 8, 1}, {4}, 3);
  CHECK(cnn.param_count() == (4 * 1 * 9 + 4) + (3 * 4 * 4 * 4 + 3));
  CHECK(init_params(cnn, 5).size() == cnn.param_count());
}

TEST_CASE("init_params is deterministic and respects the fan-in bound") {
  const auto spec = ModelSpec::logreg(2, 2);
  CHECK(init_params(spec, 7) == init_params(spec, 7));
  CHECK(init_params(spec, 7) != init_params(spec, 8));

  const auto spec3 = ModelSpec::logreg(3, 2);
  const auto params = init_params(spec3, 1);
  for (const double v : params) CHECK(std::abs(v) <= 1.0 / std::sqrt(3.0));

  const auto mlp = ModelSpec::mlp({4, 3, 2});
  CHECK(init_params(mlp, 9).size() == 23);
}

TEST_CASE("forward: zero-weight logreg is maximally uncertain") {
  const auto spec = ModelSpec::logreg(2, 2);
  const ParamVector zeros(spec.param_count(), 0.0);
  const std::vector<double> x{3.5, -1.25};
  const auto probs = forward(zeros, spec, x, 1);
  CHECK(probs[0] == doctest::Approx(0.5));
  CHECK(probs[1] == doctest::Approx(0.5));
}

TEST_CASE("forward: sigmoid at zero score") {
  const auto spec = ModelSpec::logreg(1, 2);
  const ParamVector w{1.0, 0.0};  // weight 1, bias 0
  const auto probs = forward(w, spec, {0.0}, 1);
  CHECK(probs[1] == doctest::Approx(0.5));
}

TEST_CASE("forward rows are probability simplex points") {
  Rng rng(42);
  for (const auto& spec :
       {ModelSpec::logreg(4, 3), ModelSpec::mlp({5, 4, 3}),
        ModelSpec::small_cnn({6, 6, 1}, {3}, 4)}) {
    ParamVector params = init_params(spec, rng.next_u64());
    std::vector<double> batch(3 * spec.input_dim());
    for (auto& v : batch) v = rng.normal();
    const auto probs = forward(params, spec, batch, 3);
    for (std::size_t r = 0; r < 3; ++r) {
      double sum = 0.0;
      for (int k = 0; k < spec.classes; ++k) {
        const double p = probs[r * static_cast<std::size_t>(spec.classes) +
                               static_cast<std::size_t>(k)];
        CHECK(p >= 0.0);
        sum += p;
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("loss_and_grad: zero-weight logreg single-sample gradient") {
  const auto spec = ModelSpec::logreg(2, 2);
  const ParamVector zeros(spec.param_count(), 0.0);
  const auto ds = tiny_dataset({{1.0, 0.0}}, {1}, 2);
  const auto lg = loss_and_grad(zeros, spec, MiniBatchSpec::make_plain({0}), ds, 0.0);
  // (sigmoid(0) - 1) * x = (-0.5, 0), bias grad -0.5
  CHECK(lg.grad[0] == doctest::Approx(-0.5));
  CHECK(lg.grad[1] == doctest::Approx(0.0));
  CHECK(lg.grad[2] == doctest::Approx(-0.5));
  CHECK(lg.loss == doctest::Approx(std::log(2.0)));
}

TEST_CASE("loss_and_grad: weight decay adds exactly 2*wd*theta") {
  const auto spec = ModelSpec::mlp({3, 4, 2});
  const ParamVector params = init_params(spec, 3);
  Rng rng(11);
  Dataset ds;
  ds.n = 5;
  ds.dim = 3;
  ds.classes = 2;
  ds.features.resize(15);
  for (auto& v : ds.features) v = rng.normal();
  ds.labels = {0, 1, 1, 0, 1};
  const auto batch = MiniBatchSpec::make_plain({0, 2, 4});
  const double wd = 0.37;
  const auto plain = loss_and_grad(params, spec, batch, ds, 0.0);
  const auto decayed = loss_and_grad(params, spec, batch, ds, wd);
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(decayed.grad[i] - plain.grad[i] == doctest::Approx(2.0 * wd * params[i]));
  }
}

TEST_CASE("loss_and_grad matches central finite differences") {
  Rng rng(2024);
  int cases = 0;
  for (int rep = 0; rep < 6; ++rep) {
    std::vector<ModelSpec> specs{
        ModelSpec::logreg(2 + static_cast<int>(rng.below(4)),
                          2 + static_cast<int>(rng.below(2))),
        ModelSpec::mlp({3 + static_cast<int>(rng.below(3)),
                        2 + static_cast<int>(rng.below(4)), 3}),
        ModelSpec::small_cnn({4, 4, 1}, {2}, 2)};
    for (const auto& spec : specs) {
      const std::size_t n = 6;
      Dataset ds;
      ds.n = n;
      ds.dim = spec.input_dim();
      ds.classes = spec.classes;
      ds.features.resize(n * ds.dim);
      for (auto& v : ds.features) v = rng.normal();
      ds.labels.resize(n);
      for (auto& y : ds.labels) y = static_cast<int>(rng.below(spec.classes));
      const ParamVector params = init_params(spec, rng.next_u64());
      const auto batch =
          MiniBatchSpec::make_plain(rng.sample_distinct(n, 1 + rng.below(5)));
      const double wd = rep % 2 == 0 ? 0.0 : 0.01;
      const auto lg = loss_and_grad(params, spec, batch, ds, wd);
      const auto fd = test::fd_gradient(params, spec, batch, ds, wd);
      CHECK(test::max_rel_err(lg.grad, fd) < 1e-5);
      ++cases;
    }
  }
  CHECK(cases == 18);
}

TEST_CASE("logreg closed-form gradient matches the oracle on single samples") {
  Rng rng(5);
  const auto spec = ModelSpec::logreg(3, 2);
  Dataset ds;
  ds.n = 4;
  ds.dim = 3;
  ds.classes = 2;
  ds.features.resize(12);
  for (auto& v : ds.features) v = rng.normal();
  ds.labels = {1, 0, 1, 0};
  const ParamVector w = init_params(spec, 77);
  for (std::uint32_t i = 0; i < 4; ++i) {
    const auto batch = MiniBatchSpec::make_plain({i});
    const auto lg = loss_and_grad(w, spec, batch, ds, 0.0);
    const auto oracle = test::logreg_grad_oracle(w, ds, batch, 0.0);
    for (std::size_t j = 0; j < w.size(); ++j) {
      CHECK(lg.grad[j] == doctest::Approx(oracle[j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("sgd_step arithmetic") {
  const auto minus_eta_g = sgd_step({0.0, 0.0}, {1.5, -2.0}, 0.1);
  CHECK(minus_eta_g[0] == -(0.1 * 1.5));  // exact: same fp product
  CHECK(minus_eta_g[1] == 0.1 * 2.0);
  const ParamVector theta{0.7, -0.3};
  CHECK(sgd_step(theta, {0.0, 0.0}, 0.5) == theta);
  CHECK(sgd_step({1.0, 1.0}, {2.0, -2.0}, 0.5) == ParamVector{0.0, 2.0});
}

TEST_CASE("modified_sgd_step reduces to sgd_step at momentum zero") {
  Hyperparams hp;
  hp.step_size = 0.2;
  hp.total_steps = 10;
  const ParamVector theta{0.5, -1.0, 2.0};
  const ParamVector grad{0.1, 0.2, -0.3};
  auto [next, state] = modified_sgd_step(theta, grad, OptimizerState::init(3), hp);
  CHECK(next == sgd_step(theta, grad, 0.2));  // bitwise
  CHECK(state.velocity == grad);
  CHECK(state.step_index == 1);
}

TEST_CASE("modified_sgd_step: two-step hand unroll with momentum") {
  Hyperparams hp;
  hp.step_size = 0.1;
  hp.momentum = 0.9;
  hp.total_steps = 10;
  const ParamVector theta0{1.0, 2.0};
  const ParamVector g{0.5, -0.25};
  auto [theta1, s1] = modified_sgd_step(theta0, g, OptimizerState::init(2), hp);
  auto [theta2, s2] = modified_sgd_step(theta1, g, std::move(s1), hp);
  for (std::size_t i = 0; i < 2; ++i) {
    const double expect = theta0[i] - 0.1 * g[i] - 0.1 * (1.0 + 0.9) * g[i];
    CHECK(theta2[i] == doctest::Approx(expect).epsilon(1e-15));
  }
  CHECK(s2.step_index == 2);
}

TEST_CASE("lr_at endpoints and midpoint of the cosine schedule") {
  Hyperparams hp;
  hp.step_size = 0.4;
  hp.lr_min = 0.04;
  hp.total_steps = 100;
  hp.schedule = LrSchedule::CosineAnneal;
  CHECK(lr_at(0, hp) == doctest::Approx(0.4));
  CHECK(lr_at(100, hp) == doctest::Approx(0.04));
  CHECK(lr_at(50, hp) == doctest::Approx((0.4 + 0.04) / 2.0));
  CHECK_THROWS_AS(lr_at(101, hp), std::out_of_range);
  hp.schedule = LrSchedule::Constant;
  CHECK(lr_at(33, hp) == 0.4);
}

TEST_CASE("gradient evaluation is pure and repeatable") {
  Rng rng(9);
  const auto spec = ModelSpec::mlp({4, 5, 2});
  Dataset ds;
  ds.n = 8;
  ds.dim = 4;
  ds.classes = 2;
  ds.features.resize(32);
  for (auto& v : ds.features) v = rng.normal();
  ds.labels = {0, 1, 0, 1, 1, 0, 1, 0};
  const ParamVector params = init_params(spec, 4);
  const auto batch = MiniBatchSpec::make_plain({1, 3, 6});
  const auto a = loss_and_grad(params, spec, batch, ds, 0.01);
  const auto b = loss_and_grad(params, spec, batch, ds, 0.01);
  CHECK(a.loss == b.loss);
  CHECK(a.grad == b.grad);
}

TEST_CASE("dimension mismatches are rejected") {
  const auto spec = ModelSpec::logreg(3, 2);
  const ParamVector params(spec.param_count(), 0.0);
  const ParamVector wrong(spec.param_count() + 1, 0.0);
  std::vector<double> x{1.0, 2.0, 3.0};
  CHECK_THROWS(forward(wrong, spec, x, 1));
  const auto ds = tiny_dataset({{1.0, 0.0}}, {0}, 2);  // dim 2 != 3
  CHECK_THROWS(loss_and_grad(params, spec, MiniBatchSpec::make_plain({0}), ds, 0.0));
}
