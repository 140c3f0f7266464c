#include <doctest.h>

#include <cmath>
#include <random>

#include "oid/central.hpp"
#include "oid/harness.hpp"
#include "oid/scenario.hpp"
#include "oracles.hpp"

using oid::cplx;

namespace {

oid::FeederModel two_node_feeder(double S, double P_av, double theta, double P_load,
                                 double Q_load) {
  oid::HousePayload hp;
  hp.inverter = {S, P_av, theta};
  hp.load = {P_load, Q_load};
  return oid::FeederModel({{0, oid::NodeRole::Slack, std::nullopt},
                           {1, oid::NodeRole::House, hp}},
                          {{0, 1, 1.0 / cplx(0.006, 0.004), {}}});
}

constexpr double kVmin = 0.917, kVmax = 1.042;

}  // namespace

TEST_CASE("idle feeder dispatches nothing") {
  const auto f = two_node_feeder(1.0, 0.0, std::acos(0.85), 0.0, 0.0);
  const auto r = oid::solve_central(f, {}, kVmin, kVmax);
  CHECK(std::abs(r.setpoints[0].P_c) < 1e-6);
  CHECK(std::abs(r.setpoints[0].Q_c) < 1e-6);
  CHECK(r.objective == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(r.loss_term < 1e-7);
  CHECK(oid::count_dispatched(r, 1e-4) == 0);
}

TEST_CASE("assembly exposes the expected constraint structure") {
  const oid::Scenario s = oid::bundled_scenario();
  const oid::FeederModel f = oid::make_feeder(s, 12);
  const auto asmb = oid::assemble_central(f, oid::CostSpec{}, kVmin, kVmax);
  CHECK(asmb.prog.rows_tagged(oid::RowTag::BalanceP) == 12);
  CHECK(asmb.prog.rows_tagged(oid::RowTag::BalanceQ) == 12);
  CHECK(asmb.prog.rows_tagged(oid::RowTag::PoleP) == 6);
  CHECK(asmb.prog.rows_tagged(oid::RowTag::PoleQ) == 6);
  CHECK(asmb.prog.rows_tagged(oid::RowTag::Voltage) == 2 * 19);
  CHECK(asmb.prog.rows_tagged(oid::RowTag::Curtail) == 12);
  CHECK(asmb.prog.rows_tagged(oid::RowTag::PowerFactor) == 2 * 12);
  CHECK(asmb.prog.soc_count() == 2 * 12);  // one rating + one epigraph per house
  CHECK(asmb.P.size() == 12);
  CHECK_THROWS_AS(oid::assemble_central(f, oid::CostSpec{}, 1.1, 0.9), oid::ModelError);
}

TEST_CASE("central dispatch agrees with the exhaustive oracle on tiny feeders") {
  oid::CostSpec cost;
  cost.lambda = 0.05;
  cost.b = {0.1};

  SUBCASE("overvoltage case: strong sun, light load") {
    const auto f = two_node_feeder(0.9, 0.85, std::acos(0.85), 0.1, 0.05);
    const auto sdp = oid::solve_central(f, cost, kVmin, kVmax);
    const auto brute = oracle::brute_force_dispatch(f, cost, kVmin, kVmax);
    REQUIRE(brute.found);
    CHECK(sdp.objective <= brute.objective + 2e-3);
    CHECK(sdp.rank_tightness <= 1e-6);
    CHECK(std::abs(sdp.objective - brute.objective) < 2e-3);
    CHECK(std::abs(sdp.setpoints[0].P_c - brute.setpoints[0].P_c) < 2e-2);
  }
  SUBCASE("three nodes, two houses") {
    oid::HousePayload h1, h2;
    h1.inverter = {0.7, 0.6, std::acos(0.85)};
    h1.load = {0.15, 0.07};
    h2.inverter = {0.5, 0.45, 1.5707963267948966};
    h2.load = {0.1, 0.05};
    const oid::FeederModel f({{0, oid::NodeRole::Slack, std::nullopt},
                              {1, oid::NodeRole::House, h1},
                              {2, oid::NodeRole::House, h2}},
                             {{0, 1, 1.0 / cplx(0.005, 0.003), {}},
                              {1, 2, 1.0 / cplx(0.007, 0.004), {}}});
    const auto sdp = oid::solve_central(f, cost, kVmin, kVmax);
    const auto brute = oracle::brute_force_dispatch(f, cost, kVmin, kVmax);
    REQUIRE(brute.found);
    CHECK(sdp.objective <= brute.objective + 2e-3);
    CHECK(std::abs(sdp.objective - brute.objective) < 2e-3);
  }
}

TEST_CASE("solution voltages stay inside the band and balance power") {
  const oid::Scenario s = oid::bundled_scenario();
  const oid::FeederModel f = oid::make_feeder(s, 12);
  const auto r = oid::solve_central(f, oid::cost_of(s), kVmin, kVmax);
  for (int n = 0; n < f.node_count(); ++n) {
    const double mag = std::sqrt(std::max(0.0, r.V(n, n).real()));
    CHECK(mag >= kVmin - 1e-6);
    CHECK(mag <= kVmax + 1e-6);
  }
  REQUIRE(r.v.size() == 19);
  CHECK(oid::balance_residual(f, r.v, r.setpoints) < 1e-5);
  for (std::size_t k = 0; k < r.setpoints.size(); ++k) {
    CHECK(oid::region_contains(f.house(f.houses()[static_cast<int>(k)]).inverter,
                               r.setpoints[k], 1e-6));
  }
}

TEST_CASE("sparsity weight prunes participation monotonically") {
  const oid::Scenario s = oid::bundled_scenario();
  const oid::FeederModel f = oid::make_feeder(s, 13);  // peak irradiance hour
  oid::CostSpec cost;
  cost.b = std::vector<double>(12, 0.1);
  int prev = 13;
  for (double lambda : {0.0, 0.4, 1.6}) {
    cost.lambda = lambda;
    const auto r = oid::solve_central(f, cost, kVmin, kVmax);
    const int n = oid::count_dispatched(r, 1e-4);
    CHECK(n <= prev);
    prev = n;
  }
}

TEST_CASE("dispatched counter") {
  oid::DispatchResult r;
  r.setpoints = {{0.0, 0.0}, {0.0, 0.0}};
  CHECK(oid::count_dispatched(r, 1e-4) == 0);
  r.setpoints[1] = {0.3, -0.2};
  CHECK(oid::count_dispatched(r, 1e-4) == 1);
  CHECK_THROWS_AS(oid::count_dispatched(r, 0.0), oid::ModelError);
}

TEST_CASE("objective bookkeeping is consistent") {
  const auto f = two_node_feeder(0.9, 0.8, std::acos(0.85), 0.15, 0.07);
  oid::CostSpec cost;
  cost.lambda = 0.3;
  cost.a = {0.05};
  cost.b = {0.1};
  const auto r = oid::solve_central(f, cost, kVmin, kVmax);
  CHECK(r.objective == doctest::Approx(oid::objective_value(cost, r.loss_term,
                                                            r.regularizer_term,
                                                            r.customer_term))
                           .epsilon(1e-12));
  const auto& sp = r.setpoints[0];
  CHECK(r.regularizer_term == doctest::Approx(std::hypot(sp.P_c, sp.Q_c)).epsilon(1e-12));
  CHECK(r.customer_term ==
        doctest::Approx(0.05 * sp.P_c * sp.P_c + 0.1 * sp.P_c).epsilon(1e-12));
}
