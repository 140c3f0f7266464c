#include "oid/treevar.hpp"

#include <algorithm>
#include <deque>
#include <map>

namespace oid {

TreeBlockVar::TreeBlockVar(ConicProgram& prog, int dim,
                           const std::vector<std::pair<int, int>>& edges)
    : dim_(dim) {
  if (dim < 1) throw ModelError("tree variable needs at least one node");
  if (dim == 1) {
    if (!edges.empty()) throw ModelError("a single node admits no edges");
    blocks_.push_back(prog.add_block(1));
    canon_block_ = {0};
    canon_pos_ = {0};
    bfs_parent_ = {-1};
    bfs_order_ = {0};
    return;
  }
  if (static_cast<int>(edges.size()) != dim - 1)
    throw ModelError("edge list does not form a spanning tree");

  edges_.reserve(edges.size());
  std::vector<std::vector<std::pair<int, int>>> occur(dim);  // (block, pos) per node
  std::vector<std::vector<int>> adj(dim);
  for (const auto& [a, b] : edges) {
    if (a < 0 || b < 0 || a >= dim || b >= dim || a == b)
      throw ModelError("tree edge endpoints out of range");
    const int lo = std::min(a, b), hi = std::max(a, b);
    const int e = static_cast<int>(edges_.size());
    edges_.emplace_back(lo, hi);
    blocks_.push_back(prog.add_block(2));
    occur[lo].emplace_back(e, 0);
    occur[hi].emplace_back(e, 1);
    adj[lo].push_back(hi);
    adj[hi].push_back(lo);
  }

  canon_block_.assign(dim, -1);
  canon_pos_.assign(dim, -1);
  for (int u = 0; u < dim; ++u) {
    if (occur[u].empty()) throw ModelError("edge list does not form a spanning tree");
    canon_block_[u] = occur[u].front().first;
    canon_pos_[u] = occur[u].front().second;
    // extra appearances of the same diagonal entry must agree
    for (std::size_t k = 1; k < occur[u].size(); ++k) {
      Eigen::Matrix2cd pick = Eigen::Matrix2cd::Zero();
      pick(occur[u][k].second, occur[u][k].second) = 1.0;
      LinExpr row;
      row.add(blocks_[occur[u][k].first], pick);
      Eigen::Matrix2cd minus = Eigen::Matrix2cd::Zero();
      minus(canon_pos_[u], canon_pos_[u]) = -1.0;
      row.add(blocks_[canon_block_[u]], minus);
      prog.add_equality(std::move(row), 0.0, RowTag::General);
    }
  }

  bfs_parent_.assign(dim, -1);
  bfs_order_.clear();
  bfs_order_.reserve(dim);
  std::vector<char> seen(dim, 0);
  std::deque<int> queue{0};
  seen[0] = 1;
  while (!queue.empty()) {
    const int u = queue.front();
    queue.pop_front();
    bfs_order_.push_back(u);
    for (int w : adj[u])
      if (!seen[w]) {
        seen[w] = 1;
        bfs_parent_[w] = u;
        queue.push_back(w);
      }
  }
  if (static_cast<int>(bfs_order_.size()) != dim)
    throw ModelError("edge list does not form a spanning tree");
}

std::vector<std::pair<int, Eigen::Matrix2cd>> TreeBlockVar::split(
    const Eigen::MatrixXcd& C) const {
  if (C.rows() != dim_ || C.cols() != dim_)
    throw ModelError("coefficient matrix has the wrong dimension");
  std::map<int, Eigen::Matrix2cd> parts;
  const auto at = [&](int b) -> Eigen::Matrix2cd& {
    auto it = parts.find(b);
    if (it == parts.end()) it = parts.emplace(b, Eigen::Matrix2cd::Zero()).first;
    return it->second;
  };
  if (dim_ == 1) {
    if (C(0, 0) != cplx(0.0, 0.0)) at(0)(0, 0) = C(0, 0);
  } else {
    for (int u = 0; u < dim_; ++u)
      if (C(u, u) != cplx(0.0, 0.0)) at(canon_block_[u])(canon_pos_[u], canon_pos_[u]) += C(u, u);
    std::map<std::pair<int, int>, int> edge_of;
    for (std::size_t e = 0; e < edges_.size(); ++e) edge_of[edges_[e]] = static_cast<int>(e);
    for (int i = 0; i < dim_; ++i)
      for (int j = i + 1; j < dim_; ++j) {
        if (C(i, j) == cplx(0.0, 0.0) && C(j, i) == cplx(0.0, 0.0)) continue;
        const auto it = edge_of.find({i, j});
        if (it == edge_of.end())
          throw ModelError("coefficient matrix leaves the tree pattern");
        at(it->second)(0, 1) += C(i, j);
        at(it->second)(1, 0) += C(j, i);
      }
  }
  std::vector<std::pair<int, Eigen::Matrix2cd>> out;
  out.reserve(parts.size());
  for (auto& [b, M] : parts) out.emplace_back(b, std::move(M));
  return out;
}

void TreeBlockVar::add_trace(LinExpr& e, const Eigen::MatrixXcd& C) const {
  if (dim_ == 1) {
    Eigen::MatrixXcd one(1, 1);
    one << C(0, 0);
    e.add(blocks_[0], std::move(one));
    return;
  }
  for (auto& [b, M] : split(C)) e.add(blocks_[b], M);
}

LinExpr TreeBlockVar::trace(const Eigen::MatrixXcd& C) const {
  LinExpr e;
  add_trace(e, C);
  return e;
}

void TreeBlockVar::add_cost(ConicProgram& prog, const Eigen::MatrixXcd& C) const {
  if (dim_ == 1) {
    Eigen::MatrixXcd one(1, 1);
    one << C(0, 0);
    prog.add_linear_cost(blocks_[0], one);
    return;
  }
  for (auto& [b, M] : split(C)) prog.add_linear_cost(blocks_[b], M);
}

void TreeBlockVar::set_cost(ConicSolver& solver, const Eigen::MatrixXcd& C) const {
  if (dim_ == 1) {
    Eigen::MatrixXcd one(1, 1);
    one << C(0, 0);
    solver.set_linear_cost(blocks_[0], one);
    return;
  }
  std::vector<Eigen::Matrix2cd> per(blocks_.size(), Eigen::Matrix2cd::Zero());
  for (auto& [b, M] : split(C)) per[static_cast<std::size_t>(b)] = M;
  for (std::size_t b = 0; b < blocks_.size(); ++b) solver.set_linear_cost(blocks_[b], per[b]);
}

Eigen::MatrixXcd TreeBlockVar::read(const ConicSolution& sol) const {
  Eigen::MatrixXcd V = Eigen::MatrixXcd::Zero(dim_, dim_);
  if (dim_ == 1) {
    V(0, 0) = sol.value(blocks_[0])(0, 0);
    return V;
  }
  for (int u = 0; u < dim_; ++u)
    V(u, u) = sol.value(blocks_[canon_block_[u]])(canon_pos_[u], canon_pos_[u]).real();
  for (std::size_t e = 0; e < edges_.size(); ++e) {
    const auto [lo, hi] = edges_[e];
    V(lo, hi) = sol.value(blocks_[e])(0, 1);
    V(hi, lo) = std::conj(V(lo, hi));
  }
  // fill the unspecified entries walking outward from the root: every path
  // from an already filled node i to a fresh node n runs through n's parent m
  for (std::size_t k = 1; k < bfs_order_.size(); ++k) {
    const int n = bfs_order_[k];
    const int m = bfs_parent_[n];
    for (std::size_t t = 0; t < k; ++t) {
      const int i = bfs_order_[t];
      if (i == m) continue;
      const double dmm = V(m, m).real();
      V(i, n) = dmm > 1e-300 ? V(i, m) * V(m, n) / dmm : cplx(0.0, 0.0);
      V(n, i) = std::conj(V(i, n));
    }
  }
  return V;
}

}  // namespace oid
