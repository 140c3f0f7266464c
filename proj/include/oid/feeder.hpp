#pragma once

#include <complex>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "oid/errors.hpp"

namespace oid {

using cplx = std::complex<double>;

enum class NodeRole { Slack, Pole, House };

// Operating envelope of one PV inverter at one time slot. All values per-unit.
// theta is the half-angle of the power-factor cone, theta = arccos(pf_min).
struct InverterSpec {
  double S = 0.0;     // apparent-power rating
  double P_av = 0.0;  // available active power right now
  double theta = 1.5707963267948966;  // pi/2 = no power-factor restriction

  double tan_theta() const;  // +inf when theta is (numerically) pi/2
};

struct HouseLoad {
  double P_load = 0.0;
  double Q_load = 0.0;
};

struct HousePayload {
  InverterSpec inverter;
  HouseLoad load;
};

struct Node {
  int id = 0;
  NodeRole role = NodeRole::Pole;
  std::optional<HousePayload> house;  // present iff role == House
};

// One pi-model line segment. y_shunt is the shunt admittance hung at *each*
// end of the segment (zero for the short LV spans in the bundled data).
struct Line {
  int m = 0;
  int n = 0;
  cplx y_series{0.0, 0.0};
  cplx y_shunt{0.0, 0.0};
};

// Inverter setpoint: curtailed active power and injected reactive power.
struct OperatingPoint {
  double P_c = 0.0;
  double Q_c = 0.0;
};

// Per-node Hermitian matrices entering the dispatch programs:
//   A_n = (Y_n + Y_n^H)/2,  B_n = j(Y_n - Y_n^H)/2,  M_n = e_n e_n^T
// with Y_n = e_n e_n^T Y. For any voltage vector v,
//   Tr(A_n vv^H) + j Tr(B_n vv^H) = V_n (Yv)_n^*.
struct NodeMatrices {
  Eigen::MatrixXcd A;
  Eigen::MatrixXcd B;
  Eigen::MatrixXd M;
};

// Bus admittance matrix from the line list. Throws ModelError on duplicate
// lines, out-of-range endpoints, or a disconnected graph.
Eigen::MatrixXcd build_admittance(const std::vector<Line>& lines, int n_nodes);

// Throws ModelError when n is out of range.
NodeMatrices node_matrices(const Eigen::MatrixXcd& Y, int n);

// Membership test for the inverter operating region, each constraint relaxed
// by tol:  0 <= P_c <= P_av,  Q_c^2 <= S^2 - (P_av - P_c)^2,
// |Q_c| <= tan(theta) (P_av - P_c).
bool region_contains(const InverterSpec& spec, const OperatingPoint& pt, double tol);

// L = sum over lines of Re{y_mn} (e_m - e_n)(e_m - e_n)^T; Tr(L vv^H) is the
// total series ohmic loss at voltage profile v.
Eigen::MatrixXd loss_matrix(const std::vector<Line>& lines, int n_nodes);

// Immutable network snapshot for one time slot: topology, line admittances,
// and per-house loads plus inverter availability. Construction validates the
// radial shape (node 0 slack, connected, exactly n-1 lines) and precomputes
// Y, L, and all per-node matrices; afterwards the object is safe to share
// across threads.
class FeederModel {
 public:
  FeederModel(std::vector<Node> nodes, std::vector<Line> lines);

  int node_count() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int id) const { return nodes_.at(id); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Line>& lines() const { return lines_; }

  const std::vector<int>& houses() const { return houses_; }
  const std::vector<int>& poles() const { return poles_; }

  const HousePayload& house(int id) const;

  const Eigen::MatrixXcd& admittance() const { return Y_; }
  const Eigen::MatrixXd& loss() const { return L_; }
  const NodeMatrices& matrices(int id) const { return mats_.at(id); }

 private:
  std::vector<Node> nodes_;
  std::vector<Line> lines_;
  std::vector<int> houses_;
  std::vector<int> poles_;
  Eigen::MatrixXcd Y_;
  Eigen::MatrixXd L_;
  std::vector<NodeMatrices> mats_;
};

}  // namespace oid
