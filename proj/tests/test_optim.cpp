#include <catch_amalgamated.hpp>

#include <cmath>

#include "adnac/optim.hpp"

using namespace adnac;

namespace {

ParamStore<double> scalar_store(double theta, double grad) {
  ParamStore<double> ps;
  auto& p = ps.add("theta", Tensor<double>(Shape{1}, theta));
  p.grad = Tensor<double>(Shape{1}, grad);
  return ps;
}

}  // namespace

TEST_CASE("adamw pure decay with zero gradient") {
  auto ps = scalar_store(2.5, 0.0);
  AdamWState<double> st;
  adamw_step(ps, st);
  CHECK(st.t == 1);
  CHECK(std::abs(ps[0].value.data[0] - 2.5 * (1 - 1e-6)) < 1e-15);
}

TEST_CASE("adamw first step is a sign step plus decay") {
  for (double g : {-3.0, 0.02, 7.0}) {
    auto ps = scalar_store(0.7, g);
    AdamWState<double> st;
    adamw_step(ps, st);
    const double expect = 0.7 - 1e-4 * g / (std::abs(g) + 1e-8) - 1e-4 * 0.01 * 0.7;
    CHECK(std::abs(ps[0].value.data[0] - expect) < 1e-15);
  }
}

TEST_CASE("adamw two-step hand trace without decay") {
  auto ps = scalar_store(1.0, 1.0);
  AdamWState<double> st;
  st.config.weight_decay = 0.0;
  // step 1: m = 0.1, v = 0.001, both bias-corrected to 1
  adamw_step(ps, st);
  const double th1 = 1.0 - 1e-4 * 1.0 / (1.0 + 1e-8);
  CHECK(std::abs(ps[0].value.data[0] - th1) < 1e-12);
  CHECK(std::abs(st.m["theta"][0] - 0.1) < 1e-15);
  CHECK(std::abs(st.v["theta"][0] - 0.001) < 1e-15);
  // step 2: m = 0.19, v = 0.001999; m/(1-0.81) = 1, v/(1-0.998001) = 1
  adamw_step(ps, st);
  const double m2 = 0.9 * 0.1 + 0.1, v2 = 0.999 * 0.001 + 0.001;
  const double th2 = th1 - 1e-4 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.998001)) + 1e-8);
  CHECK(std::abs(ps[0].value.data[0] - th2) < 1e-12);
}

TEST_CASE("adamw skips frozen parameters and checks shapes") {
  ParamStore<double> ps;
  auto& a = ps.add("a", Tensor<double>(Shape{3}, 1.0));
  auto& b = ps.add("b", Tensor<double>(Shape{3}, 1.0));
  a.grad = Tensor<double>(Shape{3}, 0.5);
  b.grad = Tensor<double>(Shape{3}, 0.5);
  b.frozen = true;
  AdamWState<double> st;
  adamw_step(ps, st);
  CHECK(a.value.data[0] != 1.0);
  CHECK(b.value.data == std::vector<double>(3, 1.0));
  CHECK(st.m.count("b") == 0);
  a.grad = Tensor<double>(Shape{2}, 0.5);
  CHECK_THROWS_AS(adamw_step(ps, st), ShapeError);
}

TEST_CASE("plateau scheduler") {
  SECTION("strictly improving keeps the rate") {
    PlateauState st;
    double lr = 1e-4;
    for (double m : {1.0, 0.9, 0.8, 0.5, 0.4, 0.3, 0.2}) lr = plateau_step(st, m, lr);
    CHECK(lr == 1e-4);
    CHECK(st.reductions == 0);
  }
  SECTION("flat for patience + 1 epochs halves once") {
    PlateauState st;
    double lr = 1e-4;
    lr = plateau_step(st, 1.0, lr);  // sets best
    for (int i = 0; i < 3; ++i) {
      lr = plateau_step(st, 1.0, lr);
      CHECK(lr == 1e-4);
    }
    lr = plateau_step(st, 1.0, lr);
    CHECK(lr == 0.5e-4);
    CHECK(st.bad_epochs == 0);
    for (int i = 0; i < 3; ++i) lr = plateau_step(st, 1.0, lr);
    CHECK(lr == 0.5e-4);
  }
  SECTION("improvement must beat the relative threshold") {
    PlateauState st;
    double lr = 1.0;
    lr = plateau_step(st, 1.0, lr);
    lr = plateau_step(st, 1.0 - 0.5e-4, lr);
    CHECK(st.bad_epochs == 1);
    lr = plateau_step(st, 1.0 - 2e-4, lr);
    CHECK(st.bad_epochs == 0);
    CHECK(st.best == 1.0 - 2e-4);
  }
  SECTION("negative metrics still need to go down") {
    PlateauState st;
    double lr = 1.0;
    lr = plateau_step(st, -1.0, lr);
    lr = plateau_step(st, -0.99995, lr);
    CHECK(st.bad_epochs == 1);
    lr = plateau_step(st, -1.01, lr);
    CHECK(st.bad_epochs == 0);
  }
  SECTION("never below min_lr") {
    PlateauState st;
    st.config.patience = 0;
    double lr = 3e-6;
    lr = plateau_step(st, 1.0, lr);
    for (int i = 0; i < 10; ++i) lr = plateau_step(st, 1.0, lr);
    CHECK(lr == 1e-6);
  }
  SECTION("trace is a pure function of the metric sequence") {
    std::vector<double> seq{1, 0.9, 0.95, 0.95, 0.94, 0.96, 0.97, 0.8, 0.8, 0.8, 0.8, 0.8};
    auto run = [&] {
      PlateauState st;
      double lr = 1e-4;
      std::vector<double> out;
      for (double m : seq) out.push_back(lr = plateau_step(st, m, lr));
      return out;
    };
    CHECK(run() == run());
  }
  PlateauState st;
  CHECK_THROWS_AS(plateau_step(st, std::nan(""), 1.0), NumericError);
  CHECK_THROWS_AS((PlateauConfig{1.5, 3, 1e-6, 1e-4}.validate()), ConfigError);
}
