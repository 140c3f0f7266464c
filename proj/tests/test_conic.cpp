#include <doctest.h>

#include <cmath>
#include <random>

#include "oid/conic.hpp"
#include "oracles.hpp"

using oid::cplx;

namespace {

Eigen::MatrixXcd random_hermitian(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXcd M(n, n);
  for (int c = 0; c < n; ++c)
    for (int r = 0; r < n; ++r) M(r, c) = cplx(g(rng), g(rng));
  return (M + M.adjoint()) / 2.0;
}

}  // namespace

TEST_CASE("real embedding of Hermitian matrices") {
  SUBCASE("identity embeds to identity") {
    CHECK(oid::hermitian_embed(Eigen::MatrixXcd::Identity(2, 2))
              .isApprox(Eigen::MatrixXd::Identity(4, 4)));
  }
  SUBCASE("zero embeds to zero") {
    CHECK(oid::hermitian_embed(Eigen::MatrixXcd::Zero(3, 3)).norm() == 0.0);
  }
  SUBCASE("pure imaginary pauli matrix doubles its spectrum") {
    Eigen::MatrixXcd H(2, 2);
    H << cplx(0, 0), cplx(0, -1), cplx(0, 1), cplx(0, 0);
    const auto E = oid::hermitian_embed(H);
    CHECK(E.isApprox(E.transpose()));
    const auto eig = oracle::jacobi_eig(E.cast<cplx>());
    CHECK(eig.values(0) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(eig.values(1) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(eig.values(2) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(eig.values(3) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("non-Hermitian input is rejected") {
    Eigen::MatrixXcd H(2, 2);
    H << cplx(0, 0), cplx(1, 0), cplx(2, 0), cplx(0, 0);
    CHECK_THROWS_AS(oid::hermitian_embed(H), oid::NumericalError);
  }
  SUBCASE("trace inner products are halved") {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 10; ++rep) {
      const auto A = random_hermitian(rng, 4), B = random_hermitian(rng, 4);
      const double complex_ip = (A * B).trace().real();
      const double real_ip = (oid::hermitian_embed(A) * oid::hermitian_embed(B)).trace();
      CHECK(complex_ip == doctest::Approx(real_ip / 2.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("psd projection") {
  SUBCASE("clips a negative eigenvalue") {
    Eigen::MatrixXd S(2, 2);
    S << 1, 0, 0, -1;
    Eigen::MatrixXd want(2, 2);
    want << 1, 0, 0, 0;
    CHECK(oid::psd_project(S).isApprox(want, 1e-12));
  }
  SUBCASE("fixes PSD matrices") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g;
    for (int rep = 0; rep < 5; ++rep) {
      Eigen::MatrixXd R(4, 4);
      for (int c = 0; c < 4; ++c)
        for (int r = 0; r < 4; ++r) R(r, c) = g(rng);
      const Eigen::MatrixXd psd = R * R.transpose();
      CHECK((oid::psd_project(psd) - psd).norm() < 1e-10 * (1.0 + psd.norm()));
    }
  }
  SUBCASE("matches the independent eigensolver oracle") {
    std::mt19937_64 rng(13);
    std::normal_distribution<double> g;
    for (int rep = 0; rep < 8; ++rep) {
      Eigen::MatrixXd S(5, 5);
      for (int c = 0; c < 5; ++c)
        for (int r = 0; r < 5; ++r) S(r, c) = g(rng);
      S = ((S + S.transpose()) / 2.0).eval();
      CHECK((oid::psd_project(S) - oracle::psd_clip_real(S)).norm() < 1e-10);
    }
  }
  SUBCASE("idempotent and non-expansive") {
    std::mt19937_64 rng(19);
    std::normal_distribution<double> g;
    auto rand_sym = [&] {
      Eigen::MatrixXd S(4, 4);
      for (int c = 0; c < 4; ++c)
        for (int r = 0; r < 4; ++r) S(r, c) = g(rng);
      return Eigen::MatrixXd(((S + S.transpose()) / 2.0).eval());
    };
    for (int rep = 0; rep < 10; ++rep) {
      const auto A = rand_sym(), B = rand_sym();
      const auto PA = oid::psd_project(A), PB = oid::psd_project(B);
      CHECK((oid::psd_project(PA) - PA).norm() < 1e-10);
      CHECK((PA - PB).norm() <= (A - B).norm() + 1e-12);
    }
  }
  SUBCASE("asymmetric input is rejected") {
    Eigen::MatrixXd S(2, 2);
    S << 0, 1, 0, 0;
    CHECK_THROWS_AS(oid::psd_project(S), oid::NumericalError);
  }
}

TEST_CASE("rank-1 extraction") {
  SUBCASE("exact outer product is recovered") {
    Eigen::VectorXcd v(2);
    v << cplx(1, 0), cplx(0.5, 0.5);
    const auto got = oid::rank1_extract(v * v.adjoint(), 1e-6);
    CHECK((got - v).norm() < 1e-10);
    CHECK(oid::rank_ratio(v * v.adjoint()) < 1e-12);
  }
  SUBCASE("identity has ratio one and is rejected") {
    CHECK(oid::rank_ratio(Eigen::MatrixXcd::Identity(2, 2)) == doctest::Approx(1.0));
    try {
      oid::rank1_extract(Eigen::MatrixXcd::Identity(2, 2), 1e-6);
      FAIL("expected RankError");
    } catch (const oid::RankError& e) {
      CHECK(e.ratio == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  SUBCASE("tiny perturbation still extracts") {
    Eigen::VectorXcd v(3);
    v << cplx(1, 0), cplx(0.4, -0.3), cplx(0.8, 0.1);
    const Eigen::MatrixXcd V =
        v * v.adjoint() + 1e-9 * Eigen::MatrixXcd::Identity(3, 3);
    const auto got = oid::rank1_extract(V, 1e-6);
    CHECK((got - v).lpNorm<Eigen::Infinity>() < 1e-4);
    // Frobenius bound from the discarded spectrum
    const auto eig = oracle::jacobi_eig(V);
    double tail = 0.0;
    for (int i = 0; i < 2; ++i) tail += eig.values(i) * eig.values(i);
    CHECK((V - got * got.adjoint()).norm() <= std::sqrt(tail) * (1 + 1e-9) + 1e-12);
  }
  SUBCASE("phase is anchored at entry zero") {
    Eigen::VectorXcd v(2);
    v << cplx(-0.3, 0.4), cplx(1, -1);
    const auto got = oid::rank1_extract(v * v.adjoint(), 1e-6);
    CHECK(got(0).imag() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(got(0).real() >= 0.0);
  }
}

TEST_CASE("solver on tiny canonical problems") {
  SUBCASE("one-dimensional lp") {
    oid::ConicProgram p;
    const auto x = p.add_scalar();
    p.add_linear_cost(x, 1.0);
    p.add_range(oid::LinExpr(x, 1.0), 3.0, std::numeric_limits<double>::infinity());
    const auto sol = oid::solve(p);
    REQUIRE(sol.status == oid::SolveStatus::Optimal);
    CHECK(sol.value(x) == doctest::Approx(3.0).epsilon(1e-5));
  }
  SUBCASE("diagonal sdp") {
    oid::ConicProgram p;
    const auto X = p.add_block(2);
    Eigen::MatrixXcd E11 = Eigen::MatrixXcd::Zero(2, 2), E22 = Eigen::MatrixXcd::Zero(2, 2);
    E11(0, 0) = 1;
    E22(1, 1) = 1;
    p.add_equality(oid::LinExpr().add(X, E11), 1.0);
    p.add_equality(oid::LinExpr().add(X, E22), 1.0);
    p.add_linear_cost(X, Eigen::MatrixXcd::Identity(2, 2));
    const auto sol = oid::solve(p);
    REQUIRE(sol.status == oid::SolveStatus::Optimal);
    CHECK(sol.objective == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(sol.value(X)(0, 0).real() == doctest::Approx(1.0).epsilon(1e-5));
  }
  SUBCASE("second order cone") {
    oid::ConicProgram p;
    const auto t = p.add_scalar();
    p.add_linear_cost(t, 1.0);
    std::vector<oid::LinExpr> e(3);
    e[0].add(t, 1.0);
    e[1] += 3.0;
    e[2] += 4.0;
    p.add_soc(std::move(e));
    const auto sol = oid::solve(p);
    REQUIRE(sol.status == oid::SolveStatus::Optimal);
    CHECK(sol.value(t) == doctest::Approx(5.0).epsilon(1e-6));
  }
  SUBCASE("infeasible box is reported, not silently returned") {
    oid::ConicProgram p;
    const auto x = p.add_scalar();
    p.add_equality(oid::LinExpr(x, 1.0), 1.0);
    p.add_equality(oid::LinExpr(x, 1.0), 2.0);
    const auto sol = oid::solve(p);
    CHECK(sol.status != oid::SolveStatus::Optimal);
  }
}

TEST_CASE("solver matches the first-order oracle on random sdps") {
  std::mt19937_64 rng(101);
  for (int rep = 0; rep < 4; ++rep) {
    const auto inst = oracle::random_certified_sdp(rng, 4, 5);

    oid::ConicProgram p;
    const auto X = p.add_block(4);
    for (std::size_t k = 0; k < inst.sdp.A.size(); ++k)
      p.add_equality(oid::LinExpr().add(X, inst.sdp.A[k]),
                     inst.sdp.b(static_cast<Eigen::Index>(k)));
    p.add_linear_cost(X, inst.sdp.C);
    const auto sol = oid::solve(p, 1e-8, 400000);
    REQUIRE(sol.status == oid::SolveStatus::Optimal);

    const auto ora = oracle::solve_sdp(inst.sdp);
    CHECK(ora.feasibility < 1e-7);
    CHECK(std::abs(sol.objective - ora.objective) < 1e-5);
    // both should sit on the certified optimum as well
    CHECK(std::abs(sol.objective - inst.optimal) < 1e-5);
    CHECK(std::abs(ora.objective - inst.optimal) < 1e-5);
  }
}

TEST_CASE("hermitian coordinate packing is an isometry for traces") {
  std::mt19937_64 rng(31);
  const int d = 4;
  CHECK(oid::herm_coord_count(d) == d * d);
  for (int rep = 0; rep < 10; ++rep) {
    const auto A = random_hermitian(rng, d), B = random_hermitian(rng, d);
    std::vector<double> ca(static_cast<std::size_t>(oid::herm_coord_count(d)));
    std::vector<double> cb(ca.size());
    oid::herm_to_coords(A, ca.data());
    oid::herm_to_coords(B, cb.data());
    double dot = 0.0;
    for (std::size_t i = 0; i < ca.size(); ++i) dot += ca[i] * cb[i];
    CHECK(dot == doctest::Approx((A * B).trace().real()).epsilon(1e-12));
    CHECK(oid::coords_to_herm(ca.data(), d).isApprox(A, 1e-14));
  }
}

TEST_CASE("linear costs and cone constants can be rewired between solves") {
  // minimize c*x + y subject to (x,y) in a shifted second-order cone
  oid::ConicProgram p;
  const auto t = p.add_scalar();
  const auto x = p.add_scalar();
  std::vector<oid::LinExpr> e(2);
  e[0].add(t, 1.0);
  e[1].add(x, 1.0);
  e[1] += -2.0;  // t >= |x - 2|
  const auto cone = p.add_soc(std::move(e));
  p.add_linear_cost(t, 1.0);
  p.add_linear_cost(x, 0.0);
  p.add_quadratic_cost(x, 0.5);

  oid::ConicSolver solver(p, {});
  const auto s1 = solver.solve();
  REQUIRE(s1.status == oid::SolveStatus::Optimal);
  // unconstrained by the cone at t = |x-2|: minimize 0.5 x^2 + |x - 2| -> x=1
  CHECK(s1.value(x) == doctest::Approx(1.0).epsilon(1e-4));

  // replacing the linear cost moves the optimum onto the kink at x = 2;
  // a freshly built solver must land on the same point
  solver.set_linear_cost(x, -3.0);
  const auto s2 = solver.solve();
  REQUIRE(s2.status == oid::SolveStatus::Optimal);
  CHECK(s2.value(x) == doctest::Approx(2.0).epsilon(1e-4));

  oid::ConicProgram q;
  const auto t2 = q.add_scalar();
  const auto x2 = q.add_scalar();
  std::vector<oid::LinExpr> e2(2);
  e2[0].add(t2, 1.0);
  e2[1].add(x2, 1.0);
  e2[1] += -2.0;
  q.add_soc(std::move(e2));
  q.add_linear_cost(t2, 1.0);
  q.add_linear_cost(x2, -3.0);
  q.add_quadratic_cost(x2, 0.5);
  const auto fresh = oid::solve(q);
  CHECK(s2.value(x) == doctest::Approx(fresh.value(x2)).epsilon(1e-4));

  // moving the cone shift relocates the kink the same way (x = 4 now)
  solver.set_soc_constants(cone, {0.0, -4.0});
  const auto s3 = solver.solve();
  REQUIRE(s3.status == oid::SolveStatus::Optimal);
  CHECK(s3.value(x) == doctest::Approx(4.0).epsilon(1e-4));
}

TEST_CASE("weak duality sanity on a feasible random program") {
  // minimize <C,X> with X psd, <A,X>=b; any feasible point bounds the optimum
  std::mt19937_64 rng(47);
  const auto inst = oracle::random_certified_sdp(rng, 3, 2);
  oid::ConicProgram p;
  const auto X = p.add_block(3);
  for (std::size_t k = 0; k < inst.sdp.A.size(); ++k)
    p.add_equality(oid::LinExpr().add(X, inst.sdp.A[k]),
                   inst.sdp.b(static_cast<Eigen::Index>(k)));
  p.add_linear_cost(X, inst.sdp.C);
  const auto sol = oid::solve(p, 1e-8, 400000);
  REQUIRE(sol.status == oid::SolveStatus::Optimal);
  CHECK(sol.objective <= inst.optimal + 1e-6);
  CHECK(sol.objective >= inst.optimal - 1e-6);
}
