#include "oid/feeder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <vector>

namespace oid {

double InverterSpec::tan_theta() const {
  // Treat anything at (or numerically on top of) pi/2 as "no cone": the
  // power-factor constraint disappears and only the rating circle is left.
  constexpr double half_pi = 1.5707963267948966;
  if (theta >= half_pi - 1e-12) return std::numeric_limits<double>::infinity();
  return std::tan(theta);
}

namespace {

void check_lines(const std::vector<Line>& lines, int n_nodes) {
  std::set<std::pair<int, int>> seen;
  for (const Line& ln : lines) {
    if (ln.m < 0 || ln.n < 0 || ln.m >= n_nodes || ln.n >= n_nodes)
      throw ModelError("line endpoint out of range");
    if (ln.m == ln.n) throw ModelError("line connects a node to itself");
    if (ln.y_series == cplx{0.0, 0.0}) throw ModelError("line with zero series admittance");
    auto key = std::minmax(ln.m, ln.n);
    if (!seen.insert(key).second) throw ModelError("duplicate line between nodes");
  }
  // connectivity over the undirected line graph
  std::vector<std::vector<int>> adj(n_nodes);
  for (const Line& ln : lines) {
    adj[ln.m].push_back(ln.n);
    adj[ln.n].push_back(ln.m);
  }
  std::vector<char> vis(n_nodes, 0);
  std::vector<int> stack{0};
  vis[0] = 1;
  int reached = 1;
  while (!stack.empty()) {
    int u = stack.back();
    stack.pop_back();
    for (int w : adj[u])
      if (!vis[w]) {
        vis[w] = 1;
        ++reached;
        stack.push_back(w);
      }
  }
  if (reached != n_nodes) throw ModelError("feeder graph is disconnected");
}

}  // namespace

Eigen::MatrixXcd build_admittance(const std::vector<Line>& lines, int n_nodes) {
  if (n_nodes <= 0) throw ModelError("empty node set");
  check_lines(lines, n_nodes);
  Eigen::MatrixXcd Y = Eigen::MatrixXcd::Zero(n_nodes, n_nodes);
  for (const Line& ln : lines) {
    Y(ln.m, ln.m) += ln.y_shunt + ln.y_series;
    Y(ln.n, ln.n) += ln.y_shunt + ln.y_series;
    Y(ln.m, ln.n) -= ln.y_series;
    Y(ln.n, ln.m) -= ln.y_series;
  }
  return Y;
}

NodeMatrices node_matrices(const Eigen::MatrixXcd& Y, int n) {
  const int dim = static_cast<int>(Y.rows());
  if (n < 0 || n >= dim) throw ModelError("node index out of range");
  // Y_n = e_n e_n^T Y places row n of Y into an otherwise zero matrix.
  Eigen::MatrixXcd Yn = Eigen::MatrixXcd::Zero(dim, dim);
  Yn.row(n) = Y.row(n);
  NodeMatrices out;
  out.A = 0.5 * (Yn + Yn.adjoint());
  out.B = cplx(0.0, 0.5) * (Yn - Yn.adjoint());
  out.M = Eigen::MatrixXd::Zero(dim, dim);
  out.M(n, n) = 1.0;
  return out;
}

bool region_contains(const InverterSpec& spec, const OperatingPoint& pt, double tol) {
  const double P = pt.P_c, Q = pt.Q_c;
  if (P < -tol || P > spec.P_av + tol) return false;
  const double head = spec.P_av - P;  // active power actually delivered
  if (Q * Q > spec.S * spec.S - head * head + tol) return false;
  const double t = spec.tan_theta();
  if (std::isfinite(t) && std::abs(Q) > t * head + tol) return false;
  return true;
}

Eigen::MatrixXd loss_matrix(const std::vector<Line>& lines, int n_nodes) {
  if (n_nodes <= 0) throw ModelError("empty node set");
  check_lines(lines, n_nodes);
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n_nodes, n_nodes);
  for (const Line& ln : lines) {
    const double g = ln.y_series.real();
    L(ln.m, ln.m) += g;
    L(ln.n, ln.n) += g;
    L(ln.m, ln.n) -= g;
    L(ln.n, ln.m) -= g;
  }
  return L;
}

FeederModel::FeederModel(std::vector<Node> nodes, std::vector<Line> lines)
    : nodes_(std::move(nodes)), lines_(std::move(lines)) {
  const int n = static_cast<int>(nodes_.size());
  if (n == 0) throw ModelError("empty node set");
  for (int i = 0; i < n; ++i) {
    if (nodes_[i].id != i) throw ModelError("node ids must be 0..N in order");
    if (i == 0 && nodes_[i].role != NodeRole::Slack)
      throw ModelError("node 0 must be the slack node");
    if (i > 0 && nodes_[i].role == NodeRole::Slack)
      throw ModelError("only node 0 may be the slack node");
    const bool has_house = nodes_[i].house.has_value();
    if ((nodes_[i].role == NodeRole::House) != has_house)
      throw ModelError("house payload must be present exactly on house nodes");
    if (has_house) {
      const InverterSpec& s = nodes_[i].house->inverter;
      if (s.S < 0.0) throw ModelError("negative inverter rating");
      if (s.P_av < 0.0 || s.P_av > s.S + 1e-12)
        throw ModelError("available power outside [0, S]");
      if (!(s.theta > 0.0) || s.theta > 1.5707963267948966 + 1e-12)
        throw ModelError("theta outside (0, pi/2]");
      if (nodes_[i].house->load.P_load < 0.0) throw ModelError("negative active load");
    }
  }
  if (static_cast<int>(lines_.size()) != n - 1)
    throw ModelError("feeder must be radial (exactly N lines for N+1 nodes)");
  Y_ = build_admittance(lines_, n);  // also validates connectivity
  L_ = loss_matrix(lines_, n);
  mats_.reserve(n);
  for (int i = 0; i < n; ++i) mats_.push_back(node_matrices(Y_, i));
  for (int i = 0; i < n; ++i) {
    if (nodes_[i].role == NodeRole::House) houses_.push_back(i);
    if (nodes_[i].role == NodeRole::Pole) poles_.push_back(i);
  }
}

const HousePayload& FeederModel::house(int id) const {
  const Node& nd = nodes_.at(id);
  if (!nd.house) throw ModelError("node is not a house");
  return *nd.house;
}

}  // namespace oid
