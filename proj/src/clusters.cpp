#include "oid/clusters.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "oid/parallel.hpp"

namespace oid {

namespace {

// adjacency over feeder lines
std::vector<std::vector<int>> adjacency(const FeederModel& f) {
  std::vector<std::vector<int>> adj(f.node_count());
  for (const auto& ln : f.lines()) {
    adj[ln.m].push_back(ln.n);
    adj[ln.n].push_back(ln.m);
  }
  for (auto& a : adj) std::sort(a.begin(), a.end());
  return adj;
}

}  // namespace

ClusterPartition validate_partition(const FeederModel& f,
                                    const std::vector<std::vector<int>>& clusters) {
  if (clusters.empty()) throw PartitionError("partition has no clusters");
  const int n = f.node_count();
  const int nc = static_cast<int>(clusters.size());

  ClusterPartition part;
  part.owned.resize(nc);
  for (int a = 0; a < nc; ++a) {
    part.owned[a] = clusters[a];
    std::sort(part.owned[a].begin(), part.owned[a].end());
    part.owned[a].erase(std::unique(part.owned[a].begin(), part.owned[a].end()),
                        part.owned[a].end());
    if (part.owned[a].empty())
      throw PartitionError("cluster " + std::to_string(a) + " is empty");
    for (int node : part.owned[a])
      if (node < 0 || node >= n)
        throw PartitionError("cluster " + std::to_string(a) + " references node " +
                             std::to_string(node) + " outside the feeder");
  }
  for (int a = 0; a < nc; ++a)
    for (int b = a + 1; b < nc; ++b)
      if (part.owned[a] == part.owned[b])
        throw PartitionError("nested clusters: clusters " + std::to_string(a) + " and " +
                             std::to_string(b) + " are identical");

  part.cluster_of.assign(n, -1);
  for (int a = 0; a < nc; ++a) {
    for (int node : part.owned[a]) {
      if (part.cluster_of[node] != -1)
        throw PartitionError("node " + std::to_string(node) + " appears in clusters " +
                             std::to_string(part.cluster_of[node]) + " and " +
                             std::to_string(a));
      part.cluster_of[node] = a;
    }
  }
  const auto adj = adjacency(f);
  if (part.cluster_of[0] == -1) {
    // the transformer node may be left out; it joins its lowest neighbor's cluster
    if (adj[0].empty()) throw PartitionError("node 0 is isolated");
    const int a = part.cluster_of[adj[0].front()];
    if (a == -1) throw PartitionError("node 0 and its neighbor are both unassigned");
    part.cluster_of[0] = a;
    part.owned[a].insert(part.owned[a].begin(), 0);
  }
  for (int node = 0; node < n; ++node)
    if (part.cluster_of[node] == -1)
      throw PartitionError("node " + std::to_string(node) + " is not covered by any cluster");

  // each cluster must induce a connected subtree
  for (int a = 0; a < nc; ++a) {
    std::set<int> members(part.owned[a].begin(), part.owned[a].end());
    std::set<int> seen;
    std::deque<int> queue{part.owned[a].front()};
    seen.insert(part.owned[a].front());
    while (!queue.empty()) {
      const int u = queue.front();
      queue.pop_front();
      for (int w : adj[u])
        if (members.count(w) && !seen.count(w)) {
          seen.insert(w);
          queue.push_back(w);
        }
    }
    if (seen.size() != members.size())
      throw PartitionError("cluster " + std::to_string(a) + " is not connected");
  }

  std::map<std::pair<int, int>, int> pair_border;
  for (const auto& ln : f.lines()) {
    const int a = part.cluster_of[ln.m];
    const int j = part.cluster_of[ln.n];
    if (a == j) continue;
    const auto key = std::minmax(a, j);
    if (pair_border.count({key.first, key.second}))
      throw PartitionError("cluster graph is not a tree: clusters " + std::to_string(a) +
                           " and " + std::to_string(j) + " share more than one line");
    pair_border[{key.first, key.second}] = static_cast<int>(part.borders.size());
    part.borders.push_back(BorderEdge{ln.m, ln.n, a, j});
  }
  if (static_cast<int>(part.borders.size()) != nc - 1)
    throw PartitionError("cluster graph is not a tree");
  {
    // one-edge-per-pair plus the edge count makes cycles impossible only if
    // the cluster graph is connected; verify that too
    std::vector<char> seen(nc, 0);
    std::deque<int> queue{0};
    seen[0] = 1;
    int reached = 1;
    while (!queue.empty()) {
      const int u = queue.front();
      queue.pop_front();
      for (const auto& e : part.borders) {
        const int other = (e.a == u) ? e.j : (e.j == u ? e.a : -1);
        if (other >= 0 && !seen[other]) {
          seen[other] = 1;
          ++reached;
          queue.push_back(other);
        }
      }
    }
    if (reached != nc) throw PartitionError("cluster graph is not a tree: disconnected");
  }

  part.extended = part.owned;
  part.incident.resize(nc);
  for (std::size_t e = 0; e < part.borders.size(); ++e) {
    const auto& edge = part.borders[e];
    part.extended[edge.a].push_back(edge.n);
    part.extended[edge.j].push_back(edge.m);
    part.incident[edge.a].push_back(static_cast<int>(e));
    part.incident[edge.j].push_back(static_cast<int>(e));
  }
  for (auto& ext : part.extended) std::sort(ext.begin(), ext.end());

  for (int a = 0; a < nc; ++a)
    for (int j = 0; j < nc; ++j) {
      if (a == j) continue;
      std::vector<int> rest;
      std::set_difference(part.extended[a].begin(), part.extended[a].end(),
                          part.extended[j].begin(), part.extended[j].end(),
                          std::back_inserter(rest));
      if (rest.empty())
        throw PartitionError("nested clusters: extended set of cluster " + std::to_string(a) +
                             " lies inside cluster " + std::to_string(j) + "'s");
    }

  // every owned node's neighborhood must live in the extended set, otherwise
  // restricting its balance matrices would drop coupling terms
  for (int a = 0; a < nc; ++a) {
    const std::set<int> ext(part.extended[a].begin(), part.extended[a].end());
    for (int node : part.owned[a])
      for (int w : adj[node])
        if (!ext.count(w))
          throw PartitionError("cluster " + std::to_string(a) +
                               " cannot restrict node matrices: neighbor " +
                               std::to_string(w) + " missing");
  }

  part.slack_cluster = part.cluster_of[0];
  return part;
}

std::vector<Eigen::MatrixXd> split_loss(const FeederModel& f, const ClusterPartition& part) {
  const int n = f.node_count();
  std::vector<Eigen::MatrixXd> out(part.cluster_count(), Eigen::MatrixXd::Zero(n, n));
  for (const auto& ln : f.lines()) {
    const double w = ln.y_series.real();
    Eigen::MatrixXd term = Eigen::MatrixXd::Zero(n, n);
    term(ln.m, ln.m) = w;
    term(ln.n, ln.n) = w;
    term(ln.m, ln.n) = -w;
    term(ln.n, ln.m) = -w;
    const int a = part.cluster_of[ln.m];
    const int j = part.cluster_of[ln.n];
    if (a == j) {
      out[a] += term;
    } else {
      out[a] += 0.5 * term;
      out[j] += 0.5 * term;
    }
  }
  return out;
}

namespace {

// Tr(C V) = Re V(r, c) for Hermitian V
Eigen::MatrixXcd re_entry_op(int dim, int r, int c) {
  Eigen::MatrixXcd C = Eigen::MatrixXcd::Zero(dim, dim);
  C(r, c) += cplx(0.5, 0.0);
  C(c, r) += cplx(0.5, 0.0);
  return C;
}

// Tr(C V) = Im V(r, c) for Hermitian V
Eigen::MatrixXcd im_entry_op(int dim, int r, int c) {
  Eigen::MatrixXcd C = Eigen::MatrixXcd::Zero(dim, dim);
  C(r, c) += cplx(0.0, 0.5);
  C(c, r) += cplx(0.0, -0.5);
  return C;
}

int local_index(const std::vector<int>& sorted_nodes, int node) {
  const auto it = std::lower_bound(sorted_nodes.begin(), sorted_nodes.end(), node);
  if (it == sorted_nodes.end() || *it != node)
    throw ModelError("node " + std::to_string(node) + " missing from cluster node set");
  return static_cast<int>(it - sorted_nodes.begin());
}

}  // namespace

CemProblem::CemProblem(const FeederModel& f, const CostSpec& cost, double vmin, double vmax,
                       double kappa, const ClusterPartition& part, int cluster,
                       const Eigen::MatrixXd& loss_matrix, const SolverSettings& settings)
    : vmin_(vmin),
      vmax_(vmax),
      kappa_(kappa),
      cluster_(cluster),
      asm_([&] {
        // borders and their cones are appended after the shared assembly
        return assemble_copies(f, cost, vmin, vmax, kappa, part.extended.at(cluster),
                               part.owned.at(cluster), loss_matrix);
      }()),
      solver_{[&] {
        const int dim = static_cast<int>(asm_.sub_nodes.size());
        loss_plain_ = restrict_matrix(loss_matrix.cast<cplx>(), asm_.sub_nodes).real();
        loss_cost_ = cost.loss_weight * loss_plain_.cast<cplx>();
        owned_local_.assign(dim, 0);
        for (int node : part.owned.at(cluster))
          owned_local_[local_index(asm_.sub_nodes, node)] = 1;
        for (int e : part.incident.at(cluster)) {
          const auto& edge = part.borders[e];
          border_ids_.push_back(e);
          border_sign_.push_back(edge.a == cluster ? 1.0 : -1.0);
          local_.push_back({local_index(asm_.sub_nodes, edge.m),
                            local_index(asm_.sub_nodes, edge.n)});
          const ScalarVar alpha = asm_.prog.add_scalar();
          const ScalarVar beta = asm_.prog.add_scalar();
          alpha_.push_back(alpha);
          beta_.push_back(beta);
          asm_.prog.add_linear_cost(alpha, 0.5 * kappa);
          asm_.prog.add_linear_cost(beta, 0.5 * kappa);
          const int r = local_.back()[0];
          const int c = local_.back()[1];
          // alpha >= || 2x2 Re block - lagged midpoint ||_F^2, as the cone
          // (alpha+1, 2 a, alpha-1); midpoints enter through the entry
          // constants, rewired each round
          std::vector<LinExpr> re_entries;
          re_entries.emplace_back();
          re_entries.back().add(alpha, 1.0) += 1.0;
          for (const auto& [rr, cc] :
               {std::pair{r, r}, std::pair{r, c}, std::pair{c, r}, std::pair{c, c}}) {
            re_entries.emplace_back();
            asm_.V.add_trace(re_entries.back(), 2.0 * re_entry_op(dim, rr, cc));
          }
          re_entries.emplace_back();
          re_entries.back().add(alpha, 1.0) += -1.0;
          const SocRef re_cone = asm_.prog.add_soc(std::move(re_entries), RowTag::Consensus);
          std::vector<LinExpr> im_entries;
          im_entries.emplace_back();
          im_entries.back().add(beta, 1.0) += 1.0;
          for (const auto& [rr, cc] :
               {std::pair{r, r}, std::pair{r, c}, std::pair{c, r}, std::pair{c, c}}) {
            im_entries.emplace_back();
            asm_.V.add_trace(im_entries.back(), 2.0 * im_entry_op(dim, rr, cc));
          }
          im_entries.emplace_back();
          im_entries.back().add(beta, 1.0) += -1.0;
          const SocRef im_cone = asm_.prog.add_soc(std::move(im_entries), RowTag::Consensus);
          cones_.push_back({re_cone, im_cone});
        }
        return ConicSolver(asm_.prog, settings);
      }()} {}

CemProblem::Update CemProblem::solve(const std::vector<double>& lin_p,
                                     const std::vector<double>& lin_q,
                                     const std::vector<Eigen::Matrix2d>& mid_re,
                                     const std::vector<Eigen::Matrix2d>& mid_im,
                                     const std::vector<Eigen::Matrix2d>& dual_re,
                                     const std::vector<Eigen::Matrix2d>& dual_im) {
  const std::size_t nh = asm_.Pb.size();
  const std::size_t nb = border_ids_.size();
  if (lin_p.size() != nh || lin_q.size() != nh)
    throw ModelError("one linear coefficient per owned house expected");
  if (mid_re.size() != nb || mid_im.size() != nb || dual_re.size() != nb ||
      dual_im.size() != nb)
    throw ModelError("one midpoint and dual block per incident border expected");

  for (std::size_t k = 0; k < nh; ++k) {
    solver_.set_linear_cost(asm_.Pb[k], lin_p[k]);
    solver_.set_linear_cost(asm_.Qb[k], lin_q[k]);
  }
  const int dim = static_cast<int>(asm_.sub_nodes.size());
  Eigen::MatrixXcd vcost = loss_cost_;
  for (std::size_t e = 0; e < nb; ++e) {
    const int r = local_[e][0];
    const int c = local_[e][1];
    const int rc[2] = {r, c};
    for (int s = 0; s < 2; ++s)
      for (int t = 0; t < 2; ++t) {
        vcost += dual_re[e](s, t) * re_entry_op(dim, rc[s], rc[t]);
        vcost += dual_im[e](s, t) * im_entry_op(dim, rc[s], rc[t]);
      }
    std::vector<double> re_consts{1.0};
    std::vector<double> im_consts{1.0};
    for (int s = 0; s < 2; ++s)
      for (int t = 0; t < 2; ++t) {
        re_consts.push_back(-2.0 * mid_re[e](s, t));
        im_consts.push_back(-2.0 * mid_im[e](s, t));
      }
    re_consts.push_back(-1.0);
    im_consts.push_back(-1.0);
    solver_.set_soc_constants(cones_[e][0], re_consts);
    solver_.set_soc_constants(cones_[e][1], im_consts);
  }
  asm_.V.set_cost(solver_, vcost);

  ConicSolution sol = solver_.solve();
  if (sol.status == SolveStatus::Infeasible)
    throw SolveError("cluster " + std::to_string(cluster_) + " subproblem reported infeasible");
  if (sol.status == SolveStatus::MaxIters)
    throw SolveError("cluster " + std::to_string(cluster_) + " subproblem hit its iteration cap");

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
  u.border_blocks.resize(nb);
  for (std::size_t e = 0; e < nb; ++e) {
    const int r = local_[e][0];
    const int c = local_[e][1];
    u.border_blocks[e] << u.V(r, r), u.V(r, c), u.V(c, r), u.V(c, c);
  }
  u.loss_term = (loss_plain_.cast<cplx>() * u.V).trace().real();
  // band violation over owned nodes only; foreign border diagonals are the
  // neighbor's responsibility
  u.voltage_violation = 0.0;
  for (int i = 0; i < dim; ++i) {
    if (!owned_local_[i]) continue;
    const double mag = std::sqrt(std::max(0.0, u.V(i, i).real()));
    u.voltage_violation = std::max({u.voltage_violation, vmin_ - mag, mag - vmax_});
  }
  u.voltage_violation = std::max(0.0, u.voltage_violation);
  u.solver_iterations = sol.iterations;
  return u;
}

Algorithm2Result run_algorithm2(const FeederModel& f, const CostSpec& cost, double vmin,
                                double vmax, const std::vector<std::vector<int>>& clusters,
                                const AdmmConfig& config, double ratio_tol,
                                std::optional<SolverSettings> sub) {
  if (!(config.kappa > 0)) throw ModelError("kappa must be positive");
  if (!(config.epsilon > 0)) throw ModelError("epsilon must be positive");
  if (config.max_iters < 1) throw ModelError("max_iters must be positive");
  const double kap = config.kappa;
  const ClusterPartition part = validate_partition(f, clusters);
  const int nc = part.cluster_count();
  const std::size_t nb = part.borders.size();
  const auto losses = split_loss(f, part);
  const SolverSettings settings = sub.value_or(UtilityProblem::admm_subproblem_settings());

  std::vector<CemProblem> cems;
  cems.reserve(nc);
  for (int a = 0; a < nc; ++a)
    cems.emplace_back(f, cost, vmin, vmax, kap, part, a, losses[a], settings);

  const auto& houses = f.houses();
  const std::size_t nh = houses.size();
  // owned-house bookkeeping: cluster and within-cluster slot per global house
  std::vector<int> house_cluster(nh), house_slot(nh);
  for (int a = 0; a < nc; ++a) {
    const auto& pos = cems[a].house_pos();
    for (std::size_t j = 0; j < pos.size(); ++j) {
      house_cluster[pos[j]] = a;
      house_slot[pos[j]] = static_cast<int>(j);
    }
  }
  // border slot of edge e within each side's incident list
  std::vector<std::array<int, 2>> border_slot(nb);  // [0]=a side, [1]=j side
  for (std::size_t e = 0; e < nb; ++e) {
    const auto& inc_a = part.incident[part.borders[e].a];
    const auto& inc_j = part.incident[part.borders[e].j];
    border_slot[e][0] = static_cast<int>(
        std::find(inc_a.begin(), inc_a.end(), static_cast<int>(e)) - inc_a.begin());
    border_slot[e][1] = static_cast<int>(
        std::find(inc_j.begin(), inc_j.end(), static_cast<int>(e)) - inc_j.begin());
  }

  std::vector<double> pb(nh, 0.0), qb(nh, 0.0), p(nh, 0.0), q(nh, 0.0);
  std::vector<double> gamma(nh, 0.0), mu(nh, 0.0);
  std::vector<double> np(nh), nq(nh);
  std::vector<Eigen::Matrix2cd> block_a(nb, Eigen::Matrix2cd::Zero());
  std::vector<Eigen::Matrix2cd> block_j(nb, Eigen::Matrix2cd::Zero());
  std::vector<Eigen::Matrix2d> ups(nb, Eigen::Matrix2d::Zero());
  std::vector<Eigen::Matrix2d> psi(nb, Eigen::Matrix2d::Zero());

  Algorithm2Result out;
  std::vector<CemProblem::Update> updates(nc);
  for (int it = 1; it <= config.max_iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> cp(nh), cq(nh);
    // per-cluster argument packs, all built from the lagged state
    std::vector<std::vector<double>> lin_p(nc), lin_q(nc);
    std::vector<std::vector<Eigen::Matrix2d>> mid_re(nc), mid_im(nc);
    std::vector<std::vector<Eigen::Matrix2d>> dual_re(nc), dual_im(nc);
    for (std::size_t k = 0; k < nh; ++k) {
      const int a = house_cluster[k];
      lin_p[a].resize(cems[a].house_pos().size());
      lin_q[a].resize(cems[a].house_pos().size());
    }
    for (std::size_t k = 0; k < nh; ++k) {
      const int a = house_cluster[k];
      lin_p[a][house_slot[k]] = gamma[k] - 0.5 * kap * (pb[k] + p[k]);
      lin_q[a][house_slot[k]] = mu[k] - 0.5 * kap * (qb[k] + q[k]);
      cp[k] = gamma[k] + 0.5 * kap * (pb[k] + p[k]);
      cq[k] = mu[k] + 0.5 * kap * (qb[k] + q[k]);
    }
    for (int a = 0; a < nc; ++a) {
      const std::size_t deg = part.incident[a].size();
      mid_re[a].resize(deg);
      mid_im[a].resize(deg);
      dual_re[a].resize(deg);
      dual_im[a].resize(deg);
    }
    for (std::size_t e = 0; e < nb; ++e) {
      const Eigen::Matrix2cd mid = 0.5 * (block_a[e] + block_j[e]);
      const auto& edge = part.borders[e];
      mid_re[edge.a][border_slot[e][0]] = mid.real();
      mid_im[edge.a][border_slot[e][0]] = mid.imag();
      mid_re[edge.j][border_slot[e][1]] = mid.real();
      mid_im[edge.j][border_slot[e][1]] = mid.imag();
      dual_re[edge.a][border_slot[e][0]] = ups[e];
      dual_im[edge.a][border_slot[e][0]] = psi[e];
      dual_re[edge.j][border_slot[e][1]] = -ups[e];
      dual_im[edge.j][border_slot[e][1]] = -psi[e];
    }

    par::for_each(static_cast<std::size_t>(nc), [&](std::size_t a) {
      updates[a] = cems[a].solve(lin_p[a], lin_q[a], mid_re[a], mid_im[a], dual_re[a],
                                 dual_im[a]);
    });
    par::for_each(nh, [&](std::size_t k) {
      const auto& payload = f.house(houses[k]);
      const OperatingPoint sp =
          customer_update(payload.inverter, cost.a_of(k), cost.b_of(k), kap, cp[k], cq[k]);
      np[k] = sp.P_c;
      nq[k] = sp.Q_c;
    });

    for (std::size_t k = 0; k < nh; ++k) {
      const int a = house_cluster[k];
      pb[k] = updates[a].p_bar[house_slot[k]];
      qb[k] = updates[a].q_bar[house_slot[k]];
    }
    p = np;
    q = nq;
    for (std::size_t e = 0; e < nb; ++e) {
      block_a[e] = updates[part.borders[e].a].border_blocks[border_slot[e][0]];
      block_j[e] = updates[part.borders[e].j].border_blocks[border_slot[e][1]];
    }

    double residual = 0.0;
    IterationRecord rec;
    rec.iteration = it;
    rec.p_err.resize(nh);
    rec.q_err.resize(nh);
    rec.border_err.resize(nb);
    for (std::size_t k = 0; k < nh; ++k) {
      gamma[k] += 0.5 * kap * (pb[k] - p[k]);
      mu[k] += 0.5 * kap * (qb[k] - q[k]);
      rec.p_err[k] = std::abs(pb[k] - p[k]);
      rec.q_err[k] = std::abs(qb[k] - q[k]);
      residual += rec.p_err[k] * rec.p_err[k] + rec.q_err[k] * rec.q_err[k];
    }
    for (std::size_t e = 0; e < nb; ++e) {
      const Eigen::Matrix2cd gap = block_a[e] - block_j[e];
      ups[e] += 0.5 * kap * gap.real();
      psi[e] += 0.5 * kap * gap.imag();
      rec.border_err[e] = gap.norm();
      residual += gap.squaredNorm();
    }
    double customer_cost = 0.0;
    for (std::size_t k = 0; k < nh; ++k)
      customer_cost += cost.a_of(k) * p[k] * p[k] + cost.b_of(k) * p[k];
    double loss = 0.0, reg = 0.0, violation = 0.0;
    for (const auto& u : updates) {
      loss += u.loss_term;
      reg += u.reg_term;
      violation = std::max(violation, u.voltage_violation);
    }
    rec.residual = residual;
    rec.objective = objective_value(cost, loss, reg, customer_cost);
    rec.voltage_violation = violation;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.history.push_back(std::move(rec));
    if (residual <= config.epsilon) {
      out.converged = true;
      break;
    }
  }

  out.cluster_V.resize(nc);
  out.cluster_ratios.resize(nc);
  double worst_ratio = 0.0;
  for (int a = 0; a < nc; ++a) {
    out.cluster_V[a] = updates[a].V;
    out.cluster_ratios[a] = rank_ratio(updates[a].V);
    worst_ratio = std::max(worst_ratio, out.cluster_ratios[a]);
  }

  DispatchResult& r = out.dispatch;
  r.setpoints.resize(nh);
  for (std::size_t k = 0; k < nh; ++k) r.setpoints[k] = OperatingPoint{p[k], q[k]};
  r.rank_tightness = worst_ratio;
  if (worst_ratio <= ratio_tol) {
    try {
      r.v = reassemble_voltages(part, out.cluster_V, ratio_tol);
      r.V = r.v * r.v.adjoint();
    } catch (const Error&) {
      // blocks still too inconsistent to stitch; leave the factor empty
      r.v.resize(0);
      r.V.resize(0, 0);
    }
  }
  r.loss_term = 0.0;
  for (const auto& u : updates) r.loss_term += u.loss_term;
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
  out.gamma = gamma;
  out.mu = mu;
  return out;
}

Eigen::VectorXcd reassemble_voltages(const ClusterPartition& part,
                                     const std::vector<Eigen::MatrixXcd>& cluster_V,
                                     double ratio_tol) {
  const int nc = part.cluster_count();
  if (static_cast<int>(cluster_V.size()) != nc)
    throw ModelError("one voltage matrix per cluster expected");
  const int n = static_cast<int>(part.cluster_of.size());

  std::vector<Eigen::VectorXcd> factors(nc);
  for (int a = 0; a < nc; ++a) {
    if (cluster_V[a].rows() != static_cast<int>(part.extended[a].size()))
      throw ModelError("cluster " + std::to_string(a) + " matrix has the wrong dimension");
    const double ratio = rank_ratio(cluster_V[a]);
    if (ratio > ratio_tol)
      throw RankError("cluster " + std::to_string(a) + " voltage matrix is not rank-1", ratio);
    factors[a] = rank1_extract(cluster_V[a], ratio_tol);
  }

  // walk the cluster tree, rotating each newly reached factor so the shared
  // border entry agrees with the already-aligned side
  std::vector<char> visited(nc, 0);
  std::deque<int> queue{part.slack_cluster};
  visited[part.slack_cluster] = 1;
  while (!queue.empty()) {
    const int a = queue.front();
    queue.pop_front();
    for (int e : part.incident[a]) {
      const auto& edge = part.borders[e];
      const int other = (edge.a == a) ? edge.j : edge.a;
      if (visited[other]) continue;
      visited[other] = 1;
      // anchor on whichever endpoint carries more magnitude on the aligned side
      const int ia_m = local_index(part.extended[a], edge.m);
      const int ia_n = local_index(part.extended[a], edge.n);
      const int anchor =
          (std::abs(factors[a](ia_m)) >= std::abs(factors[a](ia_n))) ? edge.m : edge.n;
      const int ia = local_index(part.extended[a], anchor);
      const int io = local_index(part.extended[other], anchor);
      const cplx z = factors[a](ia) * std::conj(factors[other](io));
      if (std::abs(z) > 0.0) factors[other] *= z / std::abs(z);
      queue.push_back(other);
    }
  }

  Eigen::VectorXcd v = Eigen::VectorXcd::Zero(n);
  for (int a = 0; a < nc; ++a)
    for (int node : part.owned[a]) v(node) = factors[a](local_index(part.extended[a], node));
  if (std::abs(v(0)) > 0.0) v *= std::conj(v(0)) / std::abs(v(0));

  for (int a = 0; a < nc; ++a) {
    const auto& ext = part.extended[a];
    double worst = 0.0;
    for (std::size_t i = 0; i < ext.size(); ++i)
      for (std::size_t j = 0; j < ext.size(); ++j)
        worst = std::max(worst,
                         std::abs(v(ext[i]) * std::conj(v(ext[j])) - cluster_V[a](i, j)));
    if (worst > 1e-5) {
      std::ostringstream msg;
      msg << "reassembled voltages miss cluster " << a << "'s block by " << worst;
      throw NumericalError(msg.str());
    }
  }
  return v;
}

}  // namespace oid
