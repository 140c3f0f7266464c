#pragma once

#include <array>
#include <optional>
#include <vector>

#include "oid/consensus.hpp"

namespace oid {

// A border joins two clusters through exactly one line (m, n); m lives in
// cluster a, n in cluster j. Orientation is fixed by the line direction and
// decides the sign with which each side holds the shared dual blocks.
struct BorderEdge {
  int m = 0, n = 0;
  int a = 0, j = 0;
};

struct ClusterPartition {
  std::vector<std::vector<int>> owned;     // per cluster, ascending node ids
  std::vector<std::vector<int>> extended;  // owned plus foreign border endpoints
  std::vector<int> cluster_of;             // per node
  std::vector<BorderEdge> borders;
  std::vector<std::vector<int>> incident;  // per cluster, border indices
  int slack_cluster = 0;

  int cluster_count() const { return static_cast<int>(owned.size()); }
};

// Checks that the clusters cover every node exactly once, each induces a
// connected subtree, neighboring clusters share exactly one line, no
// extended set swallows another, and the cluster adjacency graph is a tree.
// Node 0 may be omitted from the input; it is then assigned to the cluster
// of its lowest-numbered neighbor.
ClusterPartition validate_partition(const FeederModel& f,
                                    const std::vector<std::vector<int>>& clusters);

// Loss matrices per cluster at full network size: internal lines go to their
// owner, border lines are split evenly so the cluster objectives sum to the
// whole-feeder loss once the shared blocks agree.
std::vector<Eigen::MatrixXd> split_loss(const FeederModel& f, const ClusterPartition& part);

// One energy-management subproblem: the copies program over the extended
// node set plus, per incident border, Frobenius-ball epigraphs that pull the
// shared 2x2 voltage block toward the lagged midpoint, and trace terms for
// the border duals. Warm starts across rounds.
class CemProblem {
 public:
  struct Update {
    Eigen::MatrixXcd V;                        // over the extended node set
    std::vector<double> p_bar, q_bar;          // owned houses, feeder order
    std::vector<Eigen::Matrix2cd> border_blocks;  // per incident border, (m,n) order
    double loss_term = 0.0;
    double reg_term = 0.0;
    double voltage_violation = 0.0;
    int solver_iterations = 0;
  };

  CemProblem(const FeederModel& f, const CostSpec& cost, double vmin, double vmax,
             double kappa, const ClusterPartition& part, int cluster,
             const Eigen::MatrixXd& loss_matrix,
             const SolverSettings& settings = UtilityProblem::admm_subproblem_settings());

  // lin_p/lin_q: one coefficient per owned house (feeder order).
  // mid_re/mid_im: per incident border, lagged Re/Im block midpoints.
  // dual_re/dual_im: per incident border, this side's oriented dual blocks.
  Update solve(const std::vector<double>& lin_p, const std::vector<double>& lin_q,
               const std::vector<Eigen::Matrix2d>& mid_re,
               const std::vector<Eigen::Matrix2d>& mid_im,
               const std::vector<Eigen::Matrix2d>& dual_re,
               const std::vector<Eigen::Matrix2d>& dual_im);

  const std::vector<int>& house_pos() const { return asm_.house_pos; }
  const std::vector<int>& sub_nodes() const { return asm_.sub_nodes; }
  int cluster() const { return cluster_; }

 private:
  double vmin_, vmax_, kappa_;
  int cluster_;
  std::vector<int> border_ids_;            // partition border indices, ascending
  std::vector<double> border_sign_;        // +1 if this cluster is the `a` side
  std::vector<std::array<int, 2>> local_;  // local indices of (m, n) per border
  std::vector<char> owned_local_;          // per local node: owned by this cluster
  Eigen::MatrixXcd loss_cost_;             // weighted, restricted; base V cost
  Eigen::MatrixXd loss_plain_;             // unweighted restricted, for reporting
  CopiesAssembly asm_;
  std::vector<ScalarVar> alpha_, beta_;
  std::vector<std::array<SocRef, 2>> cones_;  // per border: Re ball, Im ball
  ConicSolver solver_;
};

struct Algorithm2Result {
  DispatchResult dispatch;  // customer-side setpoints, V reassembled from clusters
  std::vector<IterationRecord> history;
  std::vector<Eigen::MatrixXcd> cluster_V;  // last per-cluster voltage matrices
  std::vector<double> cluster_ratios;       // rank ratios of cluster_V
  std::vector<double> gamma, mu;
  bool converged = false;
};

// Multi-cluster consensus loop: per round every CEM solves its subproblem
// and every customer updates, all from the previous round's state; setpoint
// duals and border duals then move by kappa/2 times the new disagreement.
// Terminates when the squared setpoint residual plus the squared Frobenius
// border mismatch drops to epsilon. Never throws on slow convergence.
Algorithm2Result run_algorithm2(const FeederModel& f, const CostSpec& cost, double vmin,
                                double vmax, const std::vector<std::vector<int>>& clusters,
                                const AdmmConfig& config, double ratio_tol = 1e-6,
                                std::optional<SolverSettings> sub = std::nullopt);

// Stitches per-cluster rank-1 factors into one nodal voltage vector: extract
// each cluster's factor, walk the cluster tree from the slack cluster
// aligning phases at shared border nodes, anchor node 0 to a nonnegative
// real value, and verify the outer product reproduces every cluster block.
Eigen::VectorXcd reassemble_voltages(const ClusterPartition& part,
                                     const std::vector<Eigen::MatrixXcd>& cluster_V,
                                     double ratio_tol = 1e-6);

}  // namespace oid
