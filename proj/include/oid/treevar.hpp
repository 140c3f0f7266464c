#pragma once

#include <utility>
#include <vector>

#include "oid/conic.hpp"

namespace oid {

// Hermitian matrix variable over a tree-patterned index set, stored as one
// 2x2 PSD block per tree edge plus equality rows tying the shared diagonal
// entries together. A partial Hermitian matrix whose specified entries live
// on a tree always extends to a PSD completion exactly when every edge block
// is PSD, so a program whose coefficients touch only diagonal and edge
// entries keeps its optimal value while the solver handles tiny cones
// instead of one dense block.
class TreeBlockVar {
 public:
  TreeBlockVar() = default;
  // `edges` in local indices; must form a spanning tree of 0..dim-1.
  // dim == 1 degenerates to a single 1x1 block and needs no edges.
  TreeBlockVar(ConicProgram& prog, int dim, const std::vector<std::pair<int, int>>& edges);

  int dim() const { return dim_; }

  // appends Tr(C V) to e; C must be Hermitian with support inside the
  // pattern (diagonal plus tree edges), else ModelError
  void add_trace(LinExpr& e, const Eigen::MatrixXcd& C) const;
  LinExpr trace(const Eigen::MatrixXcd& C) const;

  // objective contributions Tr(C V): accumulate at build time / replace
  // between solves (set_cost rewrites every block, clearing stale terms)
  void add_cost(ConicProgram& prog, const Eigen::MatrixXcd& C) const;
  void set_cost(ConicSolver& solver, const Eigen::MatrixXcd& C) const;

  // Canonical completion of the block solution: pattern entries come from
  // the blocks, every remaining entry is filled along the tree path through
  // V_ij = V_ik V_kj / V_kk. PSD blocks complete to a PSD matrix; rank-1
  // blocks complete to the rank-1 outer product.
  Eigen::MatrixXcd read(const ConicSolution& sol) const;

 private:
  std::vector<std::pair<int, Eigen::Matrix2cd>> split(const Eigen::MatrixXcd& C) const;

  int dim_ = 0;
  std::vector<std::pair<int, int>> edges_;  // (lo, hi) per block
  std::vector<BlockVar> blocks_;
  std::vector<int> canon_block_;  // block holding each node's diagonal
  std::vector<int> canon_pos_;    // 0 or 1 within that block
  std::vector<int> bfs_parent_;   // completion order, rooted at node 0
  std::vector<int> bfs_order_;
};

}  // namespace oid
