#include "oid/central.hpp"

#include <cmath>

namespace oid {

double objective_value(const CostSpec& cost, double loss, double reg, double customer) {
  return cost.loss_weight * loss + cost.lambda * reg + customer;
}

CentralAssembly assemble_central(const FeederModel& f, const CostSpec& cost, double vmin,
                                 double vmax) {
  if (!(vmin > 0) || !(vmin < vmax)) throw ModelError("voltage band needs 0 < vmin < vmax");
  const int n = f.node_count();
  CentralAssembly out;
  ConicProgram& prog = out.prog;
  std::vector<std::pair<int, int>> edges;
  edges.reserve(f.lines().size());
  for (const auto& ln : f.lines()) edges.emplace_back(ln.m, ln.n);
  out.V = TreeBlockVar(prog, n, edges);
  const auto& houses = f.houses();
  for (std::size_t k = 0; k < houses.size(); ++k) {
    out.P.push_back(prog.add_scalar());
    out.Q.push_back(prog.add_scalar());
    out.T.push_back(prog.add_scalar());
  }

  // power balances at houses: Tr(A_h V) + P_h = P_av - P_load,
  //                           Tr(B_h V) - Q_h = -Q_load
  for (std::size_t k = 0; k < houses.size(); ++k) {
    const int h = houses[k];
    const auto& mats = f.matrices(h);
    const auto& payload = f.house(h);
    LinExpr ep = out.V.trace(mats.A);
    ep.add(out.P[k], 1.0);
    prog.add_equality(std::move(ep), payload.inverter.P_av - payload.load.P_load, RowTag::BalanceP);
    LinExpr eq = out.V.trace(mats.B);
    eq.add(out.Q[k], -1.0);
    prog.add_equality(std::move(eq), -payload.load.Q_load, RowTag::BalanceQ);
  }
  // zero injection at poles
  for (int u : f.poles()) {
    prog.add_equality(out.V.trace(f.matrices(u).A), 0.0, RowTag::PoleP);
    prog.add_equality(out.V.trace(f.matrices(u).B), 0.0, RowTag::PoleQ);
  }
  // voltage band at every node, lower and upper as separate rows
  const double inf = std::numeric_limits<double>::infinity();
  for (int m = 0; m < n; ++m) {
    const Eigen::MatrixXcd M = f.matrices(m).M.cast<cplx>();
    prog.add_range(out.V.trace(M), vmin * vmin, inf, RowTag::Voltage);
    prog.add_range(out.V.trace(M), -inf, vmax * vmax, RowTag::Voltage);
  }
  // inverter capability per house
  for (std::size_t k = 0; k < houses.size(); ++k) {
    const auto& inv = f.house(houses[k]).inverter;
    if (inv.P_av > inv.S + 1e-12) throw ModelError("available power exceeds inverter rating");
    prog.add_range(LinExpr(out.P[k], 1.0), 0.0, inv.P_av, RowTag::Curtail);
    const double t = inv.tan_theta();
    if (std::isfinite(t)) {
      // |Q| <= tan(theta) (P_av - P): two slope rows
      LinExpr up(out.Q[k], 1.0);
      up.add(out.P[k], t);
      prog.add_range(std::move(up), -inf, t * inv.P_av, RowTag::PowerFactor);
      LinExpr dn(out.Q[k], -1.0);
      dn.add(out.P[k], t);
      prog.add_range(std::move(dn), -inf, t * inv.P_av, RowTag::PowerFactor);
    }
    // S >= ||(Q, P_av - P)||
    std::vector<LinExpr> rating(3);
    rating[0] += inv.S;
    rating[1].add(out.Q[k], 1.0);
    rating[2].add(out.P[k], -1.0);
    rating[2] += inv.P_av;
    prog.add_soc(std::move(rating), RowTag::Rating);
    // t_h >= ||(P, Q)|| for the group regularizer
    std::vector<LinExpr> epi(3);
    epi[0].add(out.T[k], 1.0);
    epi[1].add(out.P[k], 1.0);
    epi[2].add(out.Q[k], 1.0);
    prog.add_soc(std::move(epi), RowTag::Sparsity);
  }

  // objective
  out.V.add_cost(prog, cost.loss_weight * f.loss().cast<cplx>());
  for (std::size_t k = 0; k < houses.size(); ++k) {
    prog.add_quadratic_cost(out.P[k], cost.a_of(k));
    prog.add_linear_cost(out.P[k], cost.b_of(k));
    prog.add_linear_cost(out.T[k], cost.lambda);
  }
  return out;
}

DispatchResult solve_central(const FeederModel& f, const CostSpec& cost, double vmin, double vmax,
                             double ratio_tol, const SolverSettings& settings) {
  CentralAssembly asmb = assemble_central(f, cost, vmin, vmax);
  ConicSolver solver(asmb.prog, settings);
  ConicSolution sol = solver.solve();
  if (sol.status == SolveStatus::Infeasible)
    throw SolveError("central problem reported infeasible");
  if (sol.status == SolveStatus::MaxIters)
    throw SolveError("central solve hit the iteration cap with residual " +
                     std::to_string(std::max(sol.primal_residual, sol.dual_residual)));

  DispatchResult r;
  r.V = asmb.V.read(sol);
  r.rank_tightness = rank_ratio(r.V);
  const auto& houses = f.houses();
  r.setpoints.resize(houses.size());
  for (std::size_t k = 0; k < houses.size(); ++k)
    r.setpoints[k] = OperatingPoint{sol.value(asmb.P[k]), sol.value(asmb.Q[k])};
  r.loss_term = (f.loss().cast<cplx>() * r.V).trace().real();
  r.regularizer_term = 0.0;
  r.customer_term = 0.0;
  for (std::size_t k = 0; k < houses.size(); ++k) {
    const auto& sp = r.setpoints[k];
    r.regularizer_term += std::hypot(sp.P_c, sp.Q_c);
    r.customer_term += cost.a_of(k) * sp.P_c * sp.P_c + cost.b_of(k) * sp.P_c;
  }
  r.objective = objective_value(cost, r.loss_term, r.regularizer_term, r.customer_term);
  r.iterations = sol.iterations;
  r.residual = sol.primal_residual;
  r.converged = true;
  if (r.rank_tightness > ratio_tol)
    throw RankError("central solution is not rank-1 (relaxation not tight)", r.rank_tightness);
  r.v = rank1_extract(r.V, ratio_tol);
  return r;
}

int count_dispatched(const DispatchResult& r, double eps) {
  if (!(eps > 0)) throw ModelError("dispatch threshold must be positive");
  int c = 0;
  for (const auto& sp : r.setpoints) c += std::hypot(sp.P_c, sp.Q_c) > eps;
  return c;
}

double balance_residual(const FeederModel& f, const Eigen::VectorXcd& v,
                        const std::vector<OperatingPoint>& setpoints) {
  if (v.size() != f.node_count()) throw ModelError("phasor vector has wrong length");
  const Eigen::VectorXcd inj = v.cwiseProduct((f.admittance() * v).conjugate());
  double worst = 0.0;
  const auto& houses = f.houses();
  for (std::size_t k = 0; k < houses.size(); ++k) {
    const auto& payload = f.house(houses[k]);
    const cplx want(payload.inverter.P_av - setpoints[k].P_c - payload.load.P_load,
                    setpoints[k].Q_c - payload.load.Q_load);
    const cplx diff = inj(houses[k]) - want;
    worst = std::max({worst, std::abs(diff.real()), std::abs(diff.imag())});
  }
  for (int u : f.poles()) {
    worst = std::max({worst, std::abs(inj(u).real()), std::abs(inj(u).imag())});
  }
  return worst;
}

}  // namespace oid
