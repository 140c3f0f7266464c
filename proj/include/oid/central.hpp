#pragma once

#include <vector>

#include "oid/conic.hpp"
#include "oid/feeder.hpp"
#include "oid/treevar.hpp"

namespace oid {

// Objective weights: loss_weight * Tr(L V) + lambda * sum_h ||(P_h, Q_h)||_2
// plus per-house curtailment costs a_h P^2 + b_h P.
struct CostSpec {
  double loss_weight = 1.0;
  double lambda = 0.0;
  std::vector<double> a;  // one per house, feeder order; empty means all zero
  std::vector<double> b;

  double a_of(std::size_t idx) const { return idx < a.size() ? a[idx] : 0.0; }
  double b_of(std::size_t idx) const { return idx < b.size() ? b[idx] : 0.0; }
};

struct DispatchResult {
  Eigen::MatrixXcd V;
  Eigen::VectorXcd v;  // phasors recovered from V when the relaxation is tight
  std::vector<OperatingPoint> setpoints;  // per house, feeder order
  double objective = 0.0;
  double loss_term = 0.0;         // Tr(L V), unweighted
  double regularizer_term = 0.0;  // sum_h ||(P_h, Q_h)||_2, unweighted
  double customer_term = 0.0;     // sum_h a_h P^2 + b_h P
  double rank_tightness = 0.0;    // lambda2 / lambda1 of V
  int iterations = 0;
  double residual = 0.0;  // solver primal residual (central) or consensus residual (decentralized)
  bool converged = true;
};

// Program plus handles into it, so callers can rewire costs between solves.
// The voltage matrix rides in per-line 2x2 blocks (see TreeBlockVar), which
// is exact on a radial feeder.
struct CentralAssembly {
  ConicProgram prog;
  TreeBlockVar V;
  std::vector<ScalarVar> P;  // curtailment per house
  std::vector<ScalarVar> Q;  // reactive injection per house
  std::vector<ScalarVar> T;  // group-lasso epigraphs, t_h >= ||(P_h, Q_h)||
};

// Full problem over voltage outer-product matrix and per-house setpoints:
// balance rows at houses, zero injection at poles, voltage band at every
// node (node 0 has no balance row but keeps its voltage rows), inverter
// capability as one range + two slope rows + one rating cone per house.
CentralAssembly assemble_central(const FeederModel& f, const CostSpec& cost, double vmin,
                                 double vmax);

DispatchResult solve_central(const FeederModel& f, const CostSpec& cost, double vmin, double vmax,
                             double ratio_tol = 1e-6, const SolverSettings& settings = {});

// Number of houses with ||(P_h, Q_h)||_2 > eps.
int count_dispatched(const DispatchResult& r, double eps);

// Max power-balance mismatch (pu, real or imaginary part) of phasors v
// against the given setpoints: injection at house h must equal
// (P_av - P_c - P_load) + j(Q_c - Q_load), zero at poles. Node 0 is free.
double balance_residual(const FeederModel& f, const Eigen::VectorXcd& v,
                        const std::vector<OperatingPoint>& setpoints);

// Objective recomputed from a solution's parts (used by result converters).
double objective_value(const CostSpec& cost, double loss, double reg, double customer);

}  // namespace oid
