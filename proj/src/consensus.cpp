#include "oid/consensus.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "oid/parallel.hpp"

namespace oid {

Eigen::MatrixXcd restrict_matrix(const Eigen::MatrixXcd& M, const std::vector<int>& idx) {
  const int k = static_cast<int>(idx.size());
  Eigen::MatrixXcd out(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) out(i, j) = M(idx[i], idx[j]);
  return out;
}

CopiesAssembly assemble_copies(const FeederModel& f, const CostSpec& cost, double vmin,
                               double vmax, double kappa, const std::vector<int>& sub_nodes,
                               const std::vector<int>& owned, const Eigen::MatrixXd& loss_matrix) {
  if (!(vmin > 0) || !(vmin < vmax)) throw ModelError("voltage band needs 0 < vmin < vmax");
  if (!(kappa > 0)) throw ModelError("kappa must be positive");
  if (!std::is_sorted(sub_nodes.begin(), sub_nodes.end()))
    throw ModelError("subproblem node set must be sorted");
  const std::set<int> owned_set(owned.begin(), owned.end());
  const std::set<int> sub_set(sub_nodes.begin(), sub_nodes.end());
  for (int n : owned)
    if (!sub_set.count(n)) throw ModelError("owned node missing from subproblem node set");

  CopiesAssembly out;
  out.sub_nodes = sub_nodes;
  const int dim = static_cast<int>(sub_nodes.size());
  std::vector<int> local(f.node_count(), -1);
  for (int i = 0; i < dim; ++i) local[sub_nodes[i]] = i;
  std::vector<std::pair<int, int>> edges;
  for (const auto& ln : f.lines())
    if (local[ln.m] >= 0 && local[ln.n] >= 0) edges.emplace_back(local[ln.m], local[ln.n]);
  out.V = TreeBlockVar(out.prog, dim, edges);

  const auto& houses = f.houses();
  for (std::size_t k = 0; k < houses.size(); ++k) {
    if (!owned_set.count(houses[k])) continue;
    out.house_pos.push_back(static_cast<int>(k));
    out.Pb.push_back(out.prog.add_scalar());
    out.Qb.push_back(out.prog.add_scalar());
    out.T.push_back(out.prog.add_scalar());
  }

  // balance rows for owned houses
  for (std::size_t j = 0; j < out.house_pos.size(); ++j) {
    const int h = houses[out.house_pos[j]];
    const auto& mats = f.matrices(h);
    const auto& payload = f.house(h);
    LinExpr ep = out.V.trace(restrict_matrix(mats.A, sub_nodes));
    ep.add(out.Pb[j], 1.0);
    out.prog.add_equality(std::move(ep), payload.inverter.P_av - payload.load.P_load,
                          RowTag::BalanceP);
    LinExpr eq = out.V.trace(restrict_matrix(mats.B, sub_nodes));
    eq.add(out.Qb[j], -1.0);
    out.prog.add_equality(std::move(eq), -payload.load.Q_load, RowTag::BalanceQ);
  }
  // zero injection at owned poles
  for (int u : f.poles()) {
    if (!owned_set.count(u)) continue;
    out.prog.add_equality(out.V.trace(restrict_matrix(f.matrices(u).A, sub_nodes)), 0.0,
                          RowTag::PoleP);
    out.prog.add_equality(out.V.trace(restrict_matrix(f.matrices(u).B, sub_nodes)), 0.0,
                          RowTag::PoleQ);
  }
  // voltage band rows for owned nodes
  const double inf = std::numeric_limits<double>::infinity();
  for (int i = 0; i < dim; ++i) {
    if (!owned_set.count(sub_nodes[i])) continue;
    Eigen::MatrixXcd M = Eigen::MatrixXcd::Zero(dim, dim);
    M(i, i) = 1.0;
    out.prog.add_range(out.V.trace(M), vmin * vmin, inf, RowTag::Voltage);
    out.prog.add_range(out.V.trace(M), -inf, vmax * vmax, RowTag::Voltage);
  }
  // group-lasso epigraphs on the copies
  for (std::size_t j = 0; j < out.house_pos.size(); ++j) {
    std::vector<LinExpr> epi(3);
    epi[0].add(out.T[j], 1.0);
    epi[1].add(out.Pb[j], 1.0);
    epi[2].add(out.Qb[j], 1.0);
    out.prog.add_soc(std::move(epi), RowTag::Sparsity);
  }
  // objective: losses + regularizer + consensus ridge (linear parts rewired later)
  out.V.add_cost(out.prog,
                 cost.loss_weight * restrict_matrix(loss_matrix.cast<cplx>(), sub_nodes));
  for (std::size_t j = 0; j < out.house_pos.size(); ++j) {
    out.prog.add_linear_cost(out.T[j], cost.lambda);
    out.prog.add_quadratic_cost(out.Pb[j], 0.5 * kappa);
    out.prog.add_quadratic_cost(out.Qb[j], 0.5 * kappa);
  }
  return out;
}

SolverSettings UtilityProblem::admm_subproblem_settings() {
  SolverSettings s;
  s.tol = 1e-8;
  s.max_iters = 200000;
  return s;
}

namespace {

std::vector<int> all_nodes(const FeederModel& f) {
  std::vector<int> v(f.node_count());
  for (int i = 0; i < f.node_count(); ++i) v[i] = i;
  return v;
}

double band_violation(const Eigen::MatrixXcd& V, double vmin, double vmax) {
  double worst = 0.0;
  for (int i = 0; i < V.rows(); ++i) {
    const double mag = std::sqrt(std::max(0.0, V(i, i).real()));
    worst = std::max({worst, vmin - mag, mag - vmax});
  }
  return std::max(0.0, worst);
}

}  // namespace

UtilityProblem::UtilityProblem(const FeederModel& f, const CostSpec& cost, double vmin,
                               double vmax, double kappa, const SolverSettings& settings)
    : vmin_(vmin),
      vmax_(vmax),
      loss_(f.loss()),
      asm_(assemble_copies(f, cost, vmin, vmax, kappa, all_nodes(f), all_nodes(f), f.loss())),
      solver_(asm_.prog, settings) {}

UtilityProblem::Update UtilityProblem::solve(const std::vector<double>& lin_p,
                                             const std::vector<double>& lin_q) {
  const std::size_t nh = asm_.Pb.size();
  if (lin_p.size() != nh || lin_q.size() != nh)
    throw ModelError("one linear coefficient per house expected");
  for (std::size_t k = 0; k < nh; ++k) {
    solver_.set_linear_cost(asm_.Pb[k], lin_p[k]);
    solver_.set_linear_cost(asm_.Qb[k], lin_q[k]);
  }
  ConicSolution sol = solver_.solve();
  if (sol.status == SolveStatus::Infeasible)
    throw SolveError("network subproblem reported infeasible");
  if (sol.status == SolveStatus::MaxIters)
    throw SolveError("network subproblem hit its iteration cap");
  Update u;
  u.V = asm_.V.read(sol);
  u.p_bar.resize(nh);
  u.q_bar.resize(nh);
  u.reg_term = 0.0;
  for (std::size_t k = 0; k < nh; ++k) {
    u.p_bar[k] = sol.value(asm_.Pb[k]);
    u.q_bar[k] = sol.value(asm_.Qb[k]);
    u.reg_term += std::hypot(u.p_bar[k], u.q_bar[k]);
  }
  u.solver_iterations = sol.iterations;
  u.voltage_violation = band_violation(u.V, vmin_, vmax_);
  u.loss_term = (loss_.cast<cplx>() * u.V).trace().real();
  return u;
}

OperatingPoint customer_update(const InverterSpec& inv, double a, double b, double kappa,
                               double cp, double cq) {
  if (!(kappa > 0)) throw ModelError("kappa must be positive");
  if (a < 0) throw ModelError("quadratic cost coefficient must be nonnegative");
  if (inv.P_av > inv.S + 1e-12) throw ModelError("available power exceeds inverter rating");
  const double S = inv.S;
  const double Pav = std::min(inv.P_av, S);
  const double t = inv.tan_theta();
  const double App = 2.0 * a + kappa;  // second derivative along P
  const double bp = b - cp;
  const double Pu = -bp / App;
  const double Qu = cq / kappa;

  const auto qcap = [&](double P) {
    const double head = Pav - P;
    double c = std::sqrt(std::max(0.0, S * S - head * head));
    if (std::isfinite(t)) c = std::min(c, t * head);
    return std::max(0.0, c);
  };
  const auto g = [&](double P, double Q) {
    return (a + 0.5 * kappa) * P * P + 0.5 * kappa * Q * Q + bp * P - cq * Q;
  };

  double bestP = Pav, bestQ = 0.0;  // the no-reactive full-curtailment vertex is always feasible
  double bestg = g(bestP, bestQ);
  const auto consider = [&](double P, double Q) {
    const double val = g(P, Q);
    if (val < bestg) {
      bestg = val;
      bestP = P;
      bestQ = Q;
    }
  };

  if (Pu >= 0.0 && Pu <= Pav && std::abs(Qu) <= qcap(Pu)) consider(Pu, Qu);
  consider(0.0, std::clamp(Qu, -qcap(0.0), qcap(0.0)));
  consider(Pav, std::clamp(Qu, -qcap(Pav), qcap(Pav)));
  if (std::isfinite(t)) {
    // power-factor edges Q = +-t (Pav - P)
    const double Plo = std::max(0.0, Pav - S / std::sqrt(1.0 + t * t));
    const double denom = App + kappa * t * t;
    for (const int sgn : {1, -1}) {
      const double Pstar = (kappa * t * t * Pav - bp + sgn * cq * t) / denom;
      const double P = std::clamp(Pstar, Plo, Pav);
      consider(P, sgn * t * (Pav - P));
    }
  }
  {
    // apparent-power arcs Q = +-sqrt(S^2 - u^2), u = Pav - P
    const double uhi = std::min(Pav, S);
    const double ulo = std::isfinite(t) ? S / std::sqrt(1.0 + t * t) : 0.0;
    if (uhi > ulo + 1e-15) {
      for (const int sgn : {1, -1}) {
        const auto arc = [&](double u) {
          return g(Pav - u, sgn * std::sqrt(std::max(0.0, S * S - u * u)));
        };
        // a convex function restricted to a boundary arc has one interior
        // minimum at most; golden-section nails it to machine precision
        double lo = ulo, hi = uhi;
        const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
        double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
        double f1 = arc(x1), f2 = arc(x2);
        for (int it = 0; it < 160; ++it) {
          if (f1 < f2) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - gr * (hi - lo);
            f1 = arc(x1);
          } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + gr * (hi - lo);
            f2 = arc(x2);
          }
        }
        for (const double u : {0.5 * (lo + hi), ulo, uhi})
          consider(Pav - u, sgn * std::sqrt(std::max(0.0, S * S - u * u)));
      }
    }
  }
  return OperatingPoint{bestP, bestQ};
}

Algorithm1Result run_algorithm1(const FeederModel& f, const CostSpec& cost, double vmin,
                                double vmax, const AdmmConfig& config, double ratio_tol,
                                std::optional<SolverSettings> sub) {
  if (!(config.kappa > 0)) throw ModelError("kappa must be positive");
  if (!(config.epsilon > 0)) throw ModelError("epsilon must be positive");
  if (config.max_iters < 1) throw ModelError("max_iters must be positive");
  const double kap = config.kappa;
  const auto& houses = f.houses();
  const std::size_t nh = houses.size();

  UtilityProblem utility(f, cost, vmin, vmax, kap,
                         sub.value_or(UtilityProblem::admm_subproblem_settings()));
  std::vector<double> pb(nh, 0.0), qb(nh, 0.0), p(nh, 0.0), q(nh, 0.0);
  std::vector<double> gamma(nh, 0.0), mu(nh, 0.0);
  std::vector<double> lin_p(nh), lin_q(nh), cp(nh), cq(nh), np(nh), nq(nh);

  Algorithm1Result out;
  UtilityProblem::Update last;
  for (int it = 1; it <= config.max_iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t k = 0; k < nh; ++k) {
      lin_p[k] = gamma[k] - 0.5 * kap * (pb[k] + p[k]);
      lin_q[k] = mu[k] - 0.5 * kap * (qb[k] + q[k]);
      cp[k] = gamma[k] + 0.5 * kap * (pb[k] + p[k]);
      cq[k] = mu[k] + 0.5 * kap * (qb[k] + q[k]);
    }
    last = utility.solve(lin_p, lin_q);
    par::for_each(nh, [&](std::size_t k) {
      const auto& payload = f.house(houses[k]);
      const OperatingPoint sp =
          customer_update(payload.inverter, cost.a_of(k), cost.b_of(k), kap, cp[k], cq[k]);
      np[k] = sp.P_c;
      nq[k] = sp.Q_c;
    });
    pb = last.p_bar;
    qb = last.q_bar;
    p = np;
    q = nq;
    double residual = 0.0;
    IterationRecord rec;
    rec.iteration = it;
    rec.p_err.resize(nh);
    rec.q_err.resize(nh);
    for (std::size_t k = 0; k < nh; ++k) {
      gamma[k] += 0.5 * kap * (pb[k] - p[k]);
      mu[k] += 0.5 * kap * (qb[k] - q[k]);
      rec.p_err[k] = std::abs(pb[k] - p[k]);
      rec.q_err[k] = std::abs(qb[k] - q[k]);
      residual += rec.p_err[k] * rec.p_err[k] + rec.q_err[k] * rec.q_err[k];
    }
    double customer_cost = 0.0;
    for (std::size_t k = 0; k < nh; ++k)
      customer_cost += cost.a_of(k) * p[k] * p[k] + cost.b_of(k) * p[k];
    rec.residual = residual;
    rec.objective = objective_value(cost, last.loss_term, last.reg_term, customer_cost);
    rec.voltage_violation = last.voltage_violation;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.history.push_back(std::move(rec));
    if (residual <= config.epsilon) {
      out.converged = true;
      break;
    }
  }

  DispatchResult& r = out.dispatch;
  r.V = last.V;
  r.rank_tightness = rank_ratio(r.V);
  r.setpoints.resize(nh);
  for (std::size_t k = 0; k < nh; ++k) r.setpoints[k] = OperatingPoint{p[k], q[k]};
  r.loss_term = last.loss_term;
  r.regularizer_term = 0.0;
  r.customer_term = 0.0;
  for (std::size_t k = 0; k < nh; ++k) {
    r.regularizer_term += std::hypot(p[k], q[k]);
    r.customer_term += cost.a_of(k) * p[k] * p[k] + cost.b_of(k) * p[k];
  }
  r.objective = objective_value(cost, r.loss_term, r.regularizer_term, r.customer_term);
  r.iterations = static_cast<int>(out.history.size());
  r.residual = out.history.empty() ? 0.0 : out.history.back().residual;
  r.converged = out.converged;
  if (r.rank_tightness <= ratio_tol) r.v = rank1_extract(r.V, ratio_tol);
  out.gamma = gamma;
  out.mu = mu;
  return out;
}

}  // namespace oid
