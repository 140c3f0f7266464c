#pragma once

#include <optional>
#include <vector>

#include "oid/central.hpp"

namespace oid {

struct AdmmConfig {
  double kappa = 1.0;     // augmentation weight, any positive value converges
  double epsilon = 1e-6;  // threshold on the squared consensus residual
  int max_iters = 2000;
};

// One consensus round's observable state, shared by both decentralized
// algorithms (border fields stay empty for the single-utility variant).
struct IterationRecord {
  int iteration = 0;
  std::vector<double> p_err;       // per house |p_bar - p|
  std::vector<double> q_err;       // per house |q_bar - q|
  std::vector<double> border_err;  // per border pair, Frobenius block mismatch
  double residual = 0.0;           // squared consensus residual (termination quantity)
  double objective = 0.0;
  double voltage_violation = 0.0;  // worst band violation of this round's V
  double wall_seconds = 0.0;
};

// Copies subproblem shared by the utility update and by per-cluster CEM
// updates: voltage matrix over `sub_nodes`, balance rows only for houses in
// `owned`, pole rows and voltage band rows only for owned nodes, setpoint
// copies with a kappa/2 ridge, group-lasso epigraphs. The linear setpoint
// costs start at zero and are rewired between solves.
struct CopiesAssembly {
  ConicProgram prog;
  TreeBlockVar V;                    // per-line 2x2 blocks over `sub_nodes`
  std::vector<ScalarVar> Pb, Qb, T;  // aligned with `house_pos`
  std::vector<int> house_pos;        // positions into feeder.houses()
  std::vector<int> sub_nodes;        // global node ids backing V, ascending
};

CopiesAssembly assemble_copies(const FeederModel& f, const CostSpec& cost, double vmin,
                               double vmax, double kappa, const std::vector<int>& sub_nodes,
                               const std::vector<int>& owned,
                               const Eigen::MatrixXd& loss_matrix);

// Hermitian principal submatrix over global node ids `idx`.
Eigen::MatrixXcd restrict_matrix(const Eigen::MatrixXcd& M, const std::vector<int>& idx);

// Utility-side update: given linear objective coefficients on the setpoint
// copies (duals and lagged values folded in by the caller), solve for the
// network-feasible copies and voltage matrix. Warm starts across calls.
class UtilityProblem {
 public:
  struct Update {
    Eigen::MatrixXcd V;
    std::vector<double> p_bar, q_bar;
    double loss_term = 0.0;  // Tr(L V)
    double reg_term = 0.0;   // sum_h ||(p_bar, q_bar)||
    double voltage_violation = 0.0;
    int solver_iterations = 0;
  };

  UtilityProblem(const FeederModel& f, const CostSpec& cost, double vmin, double vmax,
                 double kappa, const SolverSettings& settings = admm_subproblem_settings());

  Update solve(const std::vector<double>& lin_p, const std::vector<double>& lin_q);

  static SolverSettings admm_subproblem_settings();

 private:
  double vmin_, vmax_;
  Eigen::MatrixXd loss_;  // unweighted, for the reported loss term
  CopiesAssembly asm_;
  ConicSolver solver_;
};

// Customer-side update: minimize a P^2 + b P + kappa/2 (P^2 + Q^2)
//                                 - cp P - cq Q
// over the inverter capability region, exactly (active-piece enumeration).
OperatingPoint customer_update(const InverterSpec& inv, double a, double b, double kappa,
                               double cp, double cq);

struct Algorithm1Result {
  DispatchResult dispatch;  // customer-side setpoints, V from the last utility solve
  std::vector<IterationRecord> history;
  std::vector<double> gamma, mu;  // final duals per house
  bool converged = false;
};

// Utility <-> customer consensus loop. Within an iteration the utility and
// every customer update independently from the previous round's state; the
// duals then move by kappa/2 times the new disagreement. Terminates when
// sum_h (p_bar-p)^2 + (q_bar-q)^2 <= epsilon. Never throws on slow
// convergence; `converged` reports it instead.
Algorithm1Result run_algorithm1(const FeederModel& f, const CostSpec& cost, double vmin,
                                double vmax, const AdmmConfig& config, double ratio_tol = 1e-6,
                                std::optional<SolverSettings> sub = std::nullopt);

}  // namespace oid
