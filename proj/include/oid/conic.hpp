#pragma once

#include <complex>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "oid/errors.hpp"

namespace oid {

using cplx = std::complex<double>;

// ---------------------------------------------------------------------------
// Standalone matrix operations used by the solver and by result extraction.
// ---------------------------------------------------------------------------

// Real embedding [[Re H, -Im H], [Im H, Re H]] of a Hermitian matrix. The
// embedding is symmetric, doubles every eigenvalue's multiplicity, and halves
// trace inner products: Tr(A B) = Tr(embed(A) embed(B)) / 2.
// Throws NumericalError when H is not Hermitian (1e-12, relative for large
// entries).
Eigen::MatrixXd hermitian_embed(const Eigen::MatrixXcd& H);

// Nearest (Frobenius) PSD matrix: eigendecompose and clip negative
// eigenvalues. Throws NumericalError on asymmetric input or eigensolver
// failure.
Eigen::MatrixXd psd_project(const Eigen::MatrixXd& S);

// lambda2 / lambda1 of a Hermitian PSD matrix; 0 when the matrix is
// numerically zero, with negative second eigenvalues clamped to zero.
double rank_ratio(const Eigen::MatrixXcd& V);

// v = sqrt(lambda1) u1 with the global phase chosen so the first entry of
// meaningful magnitude is real nonnegative (entry 0 for voltage matrices).
// Throws RankError carrying lambda2/lambda1 when the ratio exceeds ratio_tol.
Eigen::VectorXcd rank1_extract(const Eigen::MatrixXcd& V, double ratio_tol = 1e-6);

// ---------------------------------------------------------------------------
// Program description.
// ---------------------------------------------------------------------------

struct ScalarVar { int id = -1; };
struct BlockVar  { int id = -1; };
struct SocRef    { int id = -1; };

// Affine functional over the program variables:
//   sum_k coeff_k * x_k  +  sum_b Tr(C_b V_b)  +  constant
// with every C_b Hermitian.
struct LinExpr {
  std::vector<std::pair<int, double>> scalars;
  std::vector<std::pair<int, Eigen::MatrixXcd>> blocks;
  double constant = 0.0;

  LinExpr() = default;
  LinExpr(ScalarVar v, double c) { add(v, c); }
  LinExpr& add(ScalarVar v, double c) { scalars.emplace_back(v.id, c); return *this; }
  LinExpr& add(BlockVar b, Eigen::MatrixXcd C) { blocks.emplace_back(b.id, std::move(C)); return *this; }
  LinExpr& operator+=(double c) { constant += c; return *this; }
};

// Labels for constraint rows so problem builders can expose countable
// structure (tests assert row counts per category).
enum class RowTag {
  General, BalanceP, BalanceQ, PoleP, PoleQ, Voltage,
  Curtail, PowerFactor, Rating, Sparsity, NonNeg, Consensus
};

// minimize  sum_j (w_j x_j^2 + q_j x_j) + sum_b Tr(C_b V_b)
// subject to  equality and range rows, second-order-cone memberships, every
// Hermitian block PSD, tagged scalars nonnegative.
class ConicProgram {
 public:
  BlockVar add_block(int dim);
  ScalarVar add_scalar();
  ScalarVar add_nonneg();

  void add_equality(LinExpr e, double rhs, RowTag tag = RowTag::General);
  void add_range(LinExpr e, double lo, double hi, RowTag tag = RowTag::General);
  // entries[0] >= || (entries[1], ..., entries[k]) ||_2
  SocRef add_soc(std::vector<LinExpr> entries, RowTag tag = RowTag::General);

  void add_linear_cost(ScalarVar v, double c);
  void add_linear_cost(BlockVar b, const Eigen::MatrixXcd& C);  // += Tr(C V_b)
  void add_quadratic_cost(ScalarVar v, double w);               // += w x^2, w >= 0

  int scalar_count() const { return static_cast<int>(scalar_nonneg_.size()); }
  int block_count() const { return static_cast<int>(block_dims_.size()); }
  int block_dim(BlockVar b) const { return block_dims_.at(b.id); }
  int soc_count() const { return static_cast<int>(socs_.size()); }
  int rows_tagged(RowTag tag) const;

 private:
  friend class ConicSolver;
  struct Row { LinExpr e; double lo; double hi; RowTag tag; };
  struct Soc { std::vector<LinExpr> entries; RowTag tag; };
  std::vector<int> block_dims_;
  std::vector<char> scalar_nonneg_;
  std::vector<Row> rows_;
  std::vector<Soc> socs_;
  std::vector<double> lin_cost_scalar_;
  std::vector<double> quad_cost_scalar_;
  std::vector<Eigen::MatrixXcd> lin_cost_block_;  // one Hermitian matrix per block
};

enum class SolveStatus { Optimal, MaxIters, Infeasible };
const char* to_string(SolveStatus s);

struct SolverSettings {
  double tol = 1e-7;        // absolute and relative residual target
  int max_iters = 50000;
  double alpha = 1.5;       // over-relaxation
  double sigma = 1e-6;      // primal proximal regularization
  double rho = 0.1;         // initial dual step (equalities get 1e3 rho)
  bool adaptive_rho = true;
  int check_every = 25;     // residual / termination cadence
  int scaling_iters = 10;   // Ruiz equilibration passes
  double infeas_tol = 1e-5; // certificate detection threshold
};

struct ConicSolution {
  SolveStatus status = SolveStatus::MaxIters;
  double objective = 0.0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  double comp_gap = 0.0;
  int iterations = 0;
  std::vector<double> scalars;
  std::vector<Eigen::MatrixXcd> blocks;  // exactly PSD (cone-side values)
  Eigen::VectorXd row_duals;             // one per assembled row

  double value(ScalarVar v) const { return scalars.at(v.id); }
  const Eigen::MatrixXcd& value(BlockVar b) const { return blocks.at(b.id); }
};

// Operator-splitting solver. The program structure is compiled and the KKT
// system factorized once; linear costs and second-order-cone constants may
// be replaced between solves without refactorization, and each solve warm
// starts from the previous iterate (reset_start for a cold start).
class ConicSolver {
 public:
  explicit ConicSolver(ConicProgram p, SolverSettings s = {});
  ~ConicSolver();
  ConicSolver(ConicSolver&&) noexcept;
  ConicSolver& operator=(ConicSolver&&) noexcept;

  void set_linear_cost(ScalarVar v, double c);
  void set_linear_cost(BlockVar b, const Eigen::MatrixXcd& C);
  // Replaces the additive constants of the cone's entries (one per entry).
  void set_soc_constants(SocRef s, const std::vector<double>& constants);

  ConicSolution solve();
  void reset_start();

  const ConicProgram& program() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// One-shot convenience wrapper (cold start).
ConicSolution solve(const ConicProgram& p, double tol = 1e-7, int max_iters = 50000);

/// Hermitian block <-> real coordinate vector with Tr(C V) = <coords(C), coords(V)>:
// the d diagonal entries followed by sqrt(2)*Re / sqrt(2)*Im of the upper
// triangle, column by column. Shared by the solver and the problem builders.
int herm_coord_count(int dim);
void herm_to_coords(const Eigen::MatrixXcd& H, double* out);
Eigen::MatrixXcd coords_to_herm(const double* u, int dim);

}  // namespace oid
