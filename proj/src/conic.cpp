#include "oid/conic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

namespace oid {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

bool is_hermitian(const Eigen::MatrixXcd& H, double tol) {
  if (H.rows() != H.cols()) return false;
  const double scale = std::max(1.0, H.cwiseAbs().maxCoeff());
  return (H - H.adjoint()).cwiseAbs().maxCoeff() <= tol * scale;
}

}  // namespace

// ---------------------------------------------------------------------------
// Matrix primitives
// ---------------------------------------------------------------------------

Eigen::MatrixXd hermitian_embed(const Eigen::MatrixXcd& H) {
  if (!is_hermitian(H, 1e-12)) throw NumericalError("hermitian_embed: input is not Hermitian");
  const int d = static_cast<int>(H.rows());
  Eigen::MatrixXd S(2 * d, 2 * d);
  S.topLeftCorner(d, d) = H.real();
  S.bottomRightCorner(d, d) = H.real();
  S.topRightCorner(d, d) = -H.imag();
  S.bottomLeftCorner(d, d) = H.imag();
  return S;
}

Eigen::MatrixXd psd_project(const Eigen::MatrixXd& S) {
  if (S.rows() != S.cols()) throw NumericalError("psd_project: matrix not square");
  const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
  if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw NumericalError("psd_project: input is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  if (es.info() != Eigen::Success) throw NumericalError("psd_project: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  Eigen::MatrixXd out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

double rank_ratio(const Eigen::MatrixXcd& V) {
  if (V.rows() != V.cols()) throw NumericalError("rank_ratio: matrix not square");
  if (V.rows() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(V, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericalError("rank_ratio: eigendecomposition failed");
  const auto& ev = es.eigenvalues();  // ascending
  const int d = static_cast<int>(ev.size());
  const double l1 = ev(d - 1);
  if (l1 <= 1e-14 * std::max(1.0, V.cwiseAbs().maxCoeff())) return 0.0;
  if (d == 1) return 0.0;
  return std::max(ev(d - 2), 0.0) / l1;
}

Eigen::VectorXcd rank1_extract(const Eigen::MatrixXcd& V, double ratio_tol) {
  if (!is_hermitian(V, 1e-9)) throw NumericalError("rank1_extract: input is not Hermitian");
  const int d = static_cast<int>(V.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(V);
  if (es.info() != Eigen::Success) throw NumericalError("rank1_extract: eigendecomposition failed");
  const auto& ev = es.eigenvalues();
  const double l1 = ev(d - 1);
  if (ev(0) < -1e-5 * std::max(1.0, l1))
    throw NumericalError("rank1_extract: matrix is not PSD within tolerance");
  if (l1 <= 1e-14 * std::max(1.0, V.cwiseAbs().maxCoeff()))
    return Eigen::VectorXcd::Zero(d);  // numerically zero matrix, rank <= 1 trivially
  const double ratio = d >= 2 ? std::max(ev(d - 2), 0.0) / l1 : 0.0;
  if (ratio > ratio_tol)
    throw RankError("rank1_extract: relaxation not tight (eigenvalue ratio above tolerance)", ratio);
  Eigen::VectorXcd v = std::sqrt(l1) * es.eigenvectors().col(d - 1);
  // Global phase: make the first entry of meaningful size real nonnegative
  // (entry 0 for voltage matrices, where |V_0| is bounded away from zero).
  const double vmax = v.cwiseAbs().maxCoeff();
  int pivot = 0;
  while (pivot < d - 1 && std::abs(v(pivot)) <= 1e-9 * vmax) ++pivot;
  if (std::abs(v(pivot)) > 0.0) v *= std::conj(v(pivot)) / std::abs(v(pivot));
  return v;
}

int herm_coord_count(int dim) { return dim * dim; }

void herm_to_coords(const Eigen::MatrixXcd& H, double* out) {
  const int d = static_cast<int>(H.rows());
  const double s = std::sqrt(2.0);
  int k = 0;
  for (int i = 0; i < d; ++i) out[k++] = H(i, i).real();
  for (int j = 1; j < d; ++j)
    for (int i = 0; i < j; ++i) {
      out[k++] = s * H(i, j).real();
      out[k++] = s * H(i, j).imag();
    }
}

Eigen::MatrixXcd coords_to_herm(const double* u, int dim) {
  Eigen::MatrixXcd H(dim, dim);
  const double s = 1.0 / std::sqrt(2.0);
  int k = 0;
  for (int i = 0; i < dim; ++i) H(i, i) = u[k++];
  for (int j = 1; j < dim; ++j)
    for (int i = 0; i < j; ++i) {
      const double re = u[k++] * s;
      const double im = u[k++] * s;
      H(i, j) = cplx(re, im);
      H(j, i) = cplx(re, -im);
    }
  return H;
}

// ---------------------------------------------------------------------------
// Program building
// ---------------------------------------------------------------------------

BlockVar ConicProgram::add_block(int dim) {
  if (dim <= 0) throw ModelError("conic block dimension must be positive");
  block_dims_.push_back(dim);
  lin_cost_block_.push_back(Eigen::MatrixXcd::Zero(dim, dim));
  return BlockVar{static_cast<int>(block_dims_.size()) - 1};
}

ScalarVar ConicProgram::add_scalar() {
  scalar_nonneg_.push_back(0);
  lin_cost_scalar_.push_back(0.0);
  quad_cost_scalar_.push_back(0.0);
  return ScalarVar{static_cast<int>(scalar_nonneg_.size()) - 1};
}

ScalarVar ConicProgram::add_nonneg() {
  ScalarVar v = add_scalar();
  scalar_nonneg_.back() = 1;
  return v;
}

void ConicProgram::add_equality(LinExpr e, double rhs, RowTag tag) {
  rows_.push_back(Row{std::move(e), rhs, rhs, tag});
}

void ConicProgram::add_range(LinExpr e, double lo, double hi, RowTag tag) {
  if (lo > hi) throw ModelError("conic range row with lo > hi");
  rows_.push_back(Row{std::move(e), lo, hi, tag});
}

SocRef ConicProgram::add_soc(std::vector<LinExpr> entries, RowTag tag) {
  if (entries.size() < 2) throw ModelError("second-order cone needs at least two entries");
  socs_.push_back(Soc{std::move(entries), tag});
  return SocRef{static_cast<int>(socs_.size()) - 1};
}

void ConicProgram::add_linear_cost(ScalarVar v, double c) { lin_cost_scalar_.at(v.id) += c; }

void ConicProgram::add_linear_cost(BlockVar b, const Eigen::MatrixXcd& C) {
  if (!is_hermitian(C, 1e-12)) throw ModelError("block cost matrix must be Hermitian");
  lin_cost_block_.at(b.id) += C;
}

void ConicProgram::add_quadratic_cost(ScalarVar v, double w) {
  if (w < 0.0) throw ModelError("quadratic cost weight must be nonnegative");
  quad_cost_scalar_.at(v.id) += w;
}

int ConicProgram::rows_tagged(RowTag tag) const {
  int c = 0;
  for (const auto& r : rows_) c += (r.tag == tag);
  for (const auto& s : socs_) c += (s.tag == tag);
  if (tag == RowTag::NonNeg)
    for (char f : scalar_nonneg_) c += (f != 0);
  return c;
}

const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "Optimal";
    case SolveStatus::MaxIters: return "MaxIters";
    case SolveStatus::Infeasible: return "Infeasible";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Solver internals
// ---------------------------------------------------------------------------

namespace {

struct KktFactor {
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  bool use_lu = false;

  void factor(const Eigen::SparseMatrix<double>& K) {
    ldlt.compute(K);
    if (ldlt.info() == Eigen::Success) {
      use_lu = false;
      return;
    }
    lu.compute(K);
    if (lu.info() != Eigen::Success) throw NumericalError("KKT factorization failed");
    use_lu = true;
  }
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    return use_lu ? lu.solve(b) : Eigen::VectorXd(ldlt.solve(b));
  }
};

enum class SliceKind { Box, Soc, Psd };

struct Slice {
  SliceKind kind;
  int row0 = 0;
  int len = 0;
  int block = -1;  // Psd: block id
  int soc = -1;    // Soc: user id
};

// SOC projection of (t, x): nearest point of { (t, x) : t >= ||x||_2 }.
void soc_project(Eigen::Ref<Eigen::VectorXd> v) {
  const int k = static_cast<int>(v.size());
  const double t = v(0);
  const double nx = v.tail(k - 1).norm();
  if (nx <= t) return;
  if (nx <= -t) {
    v.setZero();
    return;
  }
  const double s = 0.5 * (t + nx);
  v(0) = s;
  v.tail(k - 1) *= s / nx;
}

}  // namespace

struct ConicSolver::Impl {
  ConicProgram prog;
  SolverSettings st;

  // variable layout: scalars first, then block coordinates
  int ns = 0;
  int n = 0;
  std::vector<int> block_off;

  // assembled rows
  int m = 0;
  std::vector<Slice> slices;
  std::vector<char> row_is_eq;          // box rows with lo == hi
  Eigen::VectorXd lo0, hi0;             // unscaled bounds (non-box rows: -inf/inf)
  Eigen::VectorXd soc_c0;               // unscaled per-row SOC offsets (0 elsewhere)
  std::vector<int> soc_slice_of;        // user soc id -> slice index

  Eigen::SparseMatrix<double> A;        // scaled
  Eigen::VectorXd P0, q0;               // unscaled objective data
  Eigen::VectorXd Ph, qh;               // scaled objective data
  Eigen::VectorXd lo, hi, soc_c;        // scaled bounds / offsets

  // scaling
  Eigen::VectorXd dscale, escale;
  double cost_scale = 1.0;

  // iterates (scaled space)
  Eigen::VectorXd x, z, y;
  Eigen::VectorXd x_chk, y_chk;         // snapshots for infeasibility deltas
  bool warm = false;

  KktFactor kkt;
  Eigen::VectorXd rho;
  double rho_base;
  int last_rho_update = 0;

  explicit Impl(ConicProgram p, SolverSettings s) : prog(std::move(p)), st(s), rho_base(s.rho) {
    layout();
    assemble();
    scale();
    build_kkt();
    reset();
  }

  void layout() {
    ns = prog.scalar_count();
    n = ns;
    block_off.resize(prog.block_count());
    for (int b = 0; b < prog.block_count(); ++b) {
      block_off[b] = n;
      n += herm_coord_count(prog.block_dims_[b]);
    }
  }

  void expr_to_triplets(const LinExpr& e, int row, std::vector<Eigen::Triplet<double>>& ts) const {
    for (const auto& [id, c] : e.scalars) {
      if (id < 0 || id >= ns) throw ModelError("conic row references unknown scalar");
      if (c != 0.0) ts.emplace_back(row, id, c);
    }
    std::vector<double> buf;
    for (const auto& [b, C] : e.blocks) {
      if (b < 0 || b >= prog.block_count()) throw ModelError("conic row references unknown block");
      const int d = prog.block_dims_[b];
      if (C.rows() != d || C.cols() != d) throw ModelError("block coefficient has wrong dimension");
      if (!is_hermitian(C, 1e-12)) throw ModelError("block coefficient must be Hermitian");
      buf.resize(herm_coord_count(d));
      herm_to_coords(C, buf.data());
      for (int k = 0; k < static_cast<int>(buf.size()); ++k)
        if (buf[k] != 0.0) ts.emplace_back(row, block_off[b] + k, buf[k]);
    }
  }

  void assemble() {
    std::vector<Eigen::Triplet<double>> ts;
    std::vector<double> vlo, vhi, vc;
    std::vector<char> veq;
    int row = 0;

    auto push_box = [&](double l, double h) {
      vlo.push_back(l);
      vhi.push_back(h);
      vc.push_back(0.0);
      veq.push_back(l == h);
    };

    // explicit box / equality rows, in user order
    if (!prog.rows_.empty()) {
      Slice s{SliceKind::Box, row, 0, -1, -1};
      for (const auto& r : prog.rows_) {
        expr_to_triplets(r.e, row, ts);
        push_box(r.lo - r.e.constant, r.hi - r.e.constant);
        ++row;
      }
      s.len = row - s.row0;
      slices.push_back(s);
    }
    // nonnegative scalars
    {
      int first = row;
      for (int i = 0; i < ns; ++i)
        if (prog.scalar_nonneg_[i]) {
          ts.emplace_back(row, i, 1.0);
          push_box(0.0, kInf);
          ++row;
        }
      if (row > first) slices.push_back(Slice{SliceKind::Box, first, row - first, -1, -1});
    }
    // second-order cones
    soc_slice_of.assign(prog.socs_.size(), -1);
    for (int sid = 0; sid < static_cast<int>(prog.socs_.size()); ++sid) {
      const auto& s = prog.socs_[sid];
      Slice sl{SliceKind::Soc, row, static_cast<int>(s.entries.size()), -1, sid};
      for (const auto& e : s.entries) {
        expr_to_triplets(e, row, ts);
        vlo.push_back(-kInf);
        vhi.push_back(kInf);
        vc.push_back(e.constant);
        veq.push_back(0);
        ++row;
      }
      soc_slice_of[sid] = static_cast<int>(slices.size());
      slices.push_back(sl);
    }
    // one PSD slice per block (identity onto the block coordinates)
    for (int b = 0; b < prog.block_count(); ++b) {
      const int len = herm_coord_count(prog.block_dims_[b]);
      Slice sl{SliceKind::Psd, row, len, b, -1};
      for (int k = 0; k < len; ++k) {
        ts.emplace_back(row, block_off[b] + k, 1.0);
        vlo.push_back(-kInf);
        vhi.push_back(kInf);
        vc.push_back(0.0);
        veq.push_back(0);
        ++row;
      }
      slices.push_back(sl);
    }

    m = row;
    A.resize(m, n);
    A.setFromTriplets(ts.begin(), ts.end());
    A.makeCompressed();
    lo0 = Eigen::Map<Eigen::VectorXd>(vlo.data(), m);
    hi0 = Eigen::Map<Eigen::VectorXd>(vhi.data(), m);
    soc_c0 = Eigen::Map<Eigen::VectorXd>(vc.data(), m);
    row_is_eq.assign(veq.begin(), veq.end());

    P0.resize(n);
    q0.resize(n);
    P0.setZero();
    q0.setZero();
    for (int i = 0; i < ns; ++i) {
      P0(i) = 2.0 * prog.quad_cost_scalar_[i];  // objective uses w x^2 = (1/2) (2w) x^2
      q0(i) = prog.lin_cost_scalar_[i];
    }
    std::vector<double> buf;
    for (int b = 0; b < prog.block_count(); ++b) {
      const int d = prog.block_dims_[b];
      buf.resize(herm_coord_count(d));
      herm_to_coords(prog.lin_cost_block_[b], buf.data());
      for (int k = 0; k < static_cast<int>(buf.size()); ++k) q0(block_off[b] + k) = buf[k];
    }
  }

  // Ruiz equilibration of [[P, A^T], [A, 0]] with slice-uniform row scaling
  // (cones are invariant only under uniform positive scaling), plus OSQP-style
  // cost normalization.
  void scale() {
    dscale = Eigen::VectorXd::Ones(n);
    escale = Eigen::VectorXd::Ones(m);
    cost_scale = 1.0;
    Ph = P0;
    qh = q0;

    Eigen::VectorXd cnorm(n), rnorm(m), dd(n), de(m);
    for (int pass = 0; pass < st.scaling_iters; ++pass) {
      cnorm.setZero();
      rnorm.setZero();
      for (int j = 0; j < A.outerSize(); ++j)
        for (Eigen::SparseMatrix<double>::InnerIterator it(A, j); it; ++it) {
          const double a = std::abs(it.value());
          cnorm(it.col()) = std::max(cnorm(it.col()), a);
          rnorm(it.row()) = std::max(rnorm(it.row()), a);
        }
      for (int j = 0; j < n; ++j) cnorm(j) = std::max(cnorm(j), std::abs(Ph(j)));
      for (int j = 0; j < n; ++j)
        dd(j) = cnorm(j) > 1e-300 ? std::clamp(1.0 / std::sqrt(cnorm(j)), 1e-4, 1e4) : 1.0;
      for (const Slice& s : slices) {
        if (s.kind == SliceKind::Box) {
          for (int i = s.row0; i < s.row0 + s.len; ++i)
            de(i) = rnorm(i) > 1e-300 ? std::clamp(1.0 / std::sqrt(rnorm(i)), 1e-4, 1e4) : 1.0;
        } else {
          double mx = 0.0;
          for (int i = s.row0; i < s.row0 + s.len; ++i) mx = std::max(mx, rnorm(i));
          const double u = mx > 1e-300 ? std::clamp(1.0 / std::sqrt(mx), 1e-4, 1e4) : 1.0;
          for (int i = s.row0; i < s.row0 + s.len; ++i) de(i) = u;
        }
      }
      for (int j = 0; j < A.outerSize(); ++j)
        for (Eigen::SparseMatrix<double>::InnerIterator it(A, j); it; ++it)
          it.valueRef() *= de(it.row()) * dd(it.col());
      Ph.array() *= dd.array().square();
      qh.array() *= dd.array();
      dscale.array() *= dd.array();
      escale.array() *= de.array();

      double pmean = Ph.size() ? Ph.cwiseAbs().mean() : 0.0;
      double qinf = qh.size() ? qh.cwiseAbs().maxCoeff() : 0.0;
      double denom = std::max(pmean, qinf);
      double g = denom > 1e-300 ? std::clamp(1.0 / denom, 1e-4, 1e4) : 1.0;
      Ph *= g;
      qh *= g;
      cost_scale *= g;
    }
    lo = escale.cwiseProduct(lo0);
    hi = escale.cwiseProduct(hi0);
    for (int i = 0; i < m; ++i) {  // keep infinities clean
      if (lo0(i) == -kInf) lo(i) = -kInf;
      if (hi0(i) == kInf) hi(i) = kInf;
    }
    soc_c = escale.cwiseProduct(soc_c0);
  }

  void build_kkt() {
    double eqmul = 1e3;
    if (const char* e = std::getenv("OID_DBG_EQMUL")) eqmul = std::atof(e);
    rho.resize(m);
    for (int i = 0; i < m; ++i)
      rho(i) = std::clamp(row_is_eq[i] ? eqmul * rho_base : rho_base, 1e-6, 1e6);
    std::vector<Eigen::Triplet<double>> ts;
    ts.reserve(A.nonZeros() * 2 + n + m);
    for (int j = 0; j < n; ++j) ts.emplace_back(j, j, Ph(j) + st.sigma);
    for (int j = 0; j < A.outerSize(); ++j)
      for (Eigen::SparseMatrix<double>::InnerIterator it(A, j); it; ++it) {
        ts.emplace_back(n + it.row(), it.col(), it.value());
        ts.emplace_back(it.col(), n + it.row(), it.value());
      }
    for (int i = 0; i < m; ++i) ts.emplace_back(n + i, n + i, -1.0 / rho(i));
    Eigen::SparseMatrix<double> K(n + m, n + m);
    K.setFromTriplets(ts.begin(), ts.end());
    K.makeCompressed();
    kkt.factor(K);
  }

  void reset() {
    x = Eigen::VectorXd::Zero(n);
    z = Eigen::VectorXd::Zero(m);
    y = Eigen::VectorXd::Zero(m);
    warm = false;
  }

  // projection onto the (scaled) constraint set, slice by slice
  void project(Eigen::VectorXd& w) const {
    for (const Slice& s : slices) {
      switch (s.kind) {
        case SliceKind::Box:
          for (int i = s.row0; i < s.row0 + s.len; ++i)
            w(i) = std::min(std::max(w(i), lo(i)), hi(i));
          break;
        case SliceKind::Soc: {
          Eigen::VectorXd v = w.segment(s.row0, s.len) + soc_c.segment(s.row0, s.len);
          soc_project(v);
          w.segment(s.row0, s.len) = v - soc_c.segment(s.row0, s.len);
          break;
        }
        case SliceKind::Psd: {
          const int d = prog.block_dims_[s.block];
          Eigen::MatrixXcd H = coords_to_herm(w.data() + s.row0, d);
          Eigen::MatrixXd Sp = psd_project(hermitian_embed(H));
          Eigen::MatrixXd X = 0.5 * (Sp.topLeftCorner(d, d) + Sp.bottomRightCorner(d, d));
          Eigen::MatrixXd Zm = 0.5 * (Sp.bottomLeftCorner(d, d) - Sp.topRightCorner(d, d));
          Eigen::MatrixXcd Hp = (0.5 * (X + X.transpose())).cast<cplx>() +
                                cplx(0, 0.5) * (Zm - Zm.transpose()).cast<cplx>();
          herm_to_coords(Hp, w.data() + s.row0);
          break;
        }
      }
    }
  }

  // ---- unscaled quantities for termination and reporting ----
  struct Residuals {
    double rp, rp_scale, rd, rd_scale, gap, obj;
  };

  Residuals residuals() const {
    Residuals r{};
    Eigen::VectorXd x0 = dscale.cwiseProduct(x);
    Eigen::VectorXd Ax0 = (A * x).cwiseQuotient(escale);
    Eigen::VectorXd z0 = z.cwiseQuotient(escale);
    Eigen::VectorXd y0 = escale.cwiseProduct(y) / cost_scale;
    Eigen::VectorXd Px0 = P0.cwiseProduct(x0);
    Eigen::VectorXd Aty0 = (A.transpose() * y).cwiseQuotient(dscale) / cost_scale;
    r.rp = m ? (Ax0 - z0).cwiseAbs().maxCoeff() : 0.0;
    r.rp_scale = m ? std::max(Ax0.cwiseAbs().maxCoeff(), z0.cwiseAbs().maxCoeff()) : 0.0;
    Eigen::VectorXd dres = Px0 + q0 + Aty0;
    r.rd = dres.cwiseAbs().maxCoeff();
    r.rd_scale = std::max({Px0.cwiseAbs().maxCoeff(), q0.cwiseAbs().maxCoeff(),
                           Aty0.cwiseAbs().maxCoeff()});
    // complementarity: <z, y> - support(y). The dual update keeps box duals
    // sign-feasible up to roundoff (y = rho*(w - proj(w)) each pass), so a
    // wrong-sign component against an open bound is ulp noise; clamp it to
    // zero rather than letting the support blow up to infinity.
    double g = 0.0;
    for (const Slice& s : slices) {
      if (s.kind == SliceKind::Box) {
        for (int i = s.row0; i < s.row0 + s.len; ++i) {
          double yi = y0(i);
          if (yi > 0.0 && hi0(i) >= kInf) yi = 0.0;
          if (yi < 0.0 && lo0(i) <= -kInf) yi = 0.0;
          const double sup = yi > 0.0 ? hi0(i) * yi : (yi < 0.0 ? lo0(i) * yi : 0.0);
          g += z0(i) * yi - sup;
        }
      } else {
        for (int i = s.row0; i < s.row0 + s.len; ++i)
          g += (z0(i) + soc_c0(i)) * y0(i);
      }
    }
    r.gap = std::abs(g);
    r.obj = 0.5 * x0.dot(P0.cwiseProduct(x0)) + q0.dot(x0);
    return r;
  }

  bool primal_infeasible(const Eigen::VectorXd& dy_scaled) const {
    Eigen::VectorXd dy = escale.cwiseProduct(dy_scaled) / cost_scale;
    const double nrm = dy.cwiseAbs().maxCoeff();
    if (nrm <= 1e-12) return false;
    Eigen::VectorXd Atdy = (A.transpose() * dy_scaled).cwiseQuotient(dscale) / cost_scale;
    if (Atdy.cwiseAbs().maxCoeff() > st.infeas_tol * nrm) return false;
    double sup = 0.0;
    for (const Slice& s : slices) {
      if (s.kind == SliceKind::Box) {
        for (int i = s.row0; i < s.row0 + s.len; ++i) {
          const double v = dy(i);
          if (v > 0.0) {
            if (hi0(i) == kInf) return false;
            sup += hi0(i) * v;
          } else if (v < 0.0) {
            if (lo0(i) == -kInf) return false;
            sup += lo0(i) * v;
          }
        }
      } else if (s.kind == SliceKind::Soc) {
        Eigen::VectorXd md = -dy.segment(s.row0, s.len);
        Eigen::VectorXd pj = md;
        soc_project(pj);
        if ((pj - md).norm() > st.infeas_tol * std::max(1e-30, md.norm())) return false;
        // support of {z : z + c in K} at dy is -<c, dy> when dy is in the polar cone
        sup -= soc_c0.segment(s.row0, s.len).dot(dy.segment(s.row0, s.len));
      } else {
        const int d = prog.block_dims_[s.block];
        Eigen::VectorXd md = -dy.segment(s.row0, s.len);
        Eigen::MatrixXcd H = coords_to_herm(md.data(), d);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(H, Eigen::EigenvaluesOnly);
        if (es.info() != Eigen::Success) return false;
        if (es.eigenvalues()(0) < -st.infeas_tol * std::max(1e-30, md.norm())) return false;
      }
    }
    return sup < -st.infeas_tol * nrm;
  }

  bool dual_infeasible(const Eigen::VectorXd& dx_scaled) const {
    Eigen::VectorXd dx = dscale.cwiseProduct(dx_scaled);
    const double nrm = dx.cwiseAbs().maxCoeff();
    if (nrm <= 1e-12) return false;
    Eigen::VectorXd Pdx = Ph.cwiseProduct(dx_scaled).cwiseQuotient(dscale) / cost_scale;
    if (Pdx.cwiseAbs().maxCoeff() > st.infeas_tol * nrm) return false;
    if (q0.dot(dx) > -st.infeas_tol * nrm) return false;
    Eigen::VectorXd Adx = (A * dx_scaled).cwiseQuotient(escale);
    for (const Slice& s : slices) {
      if (s.kind == SliceKind::Box) {
        for (int i = s.row0; i < s.row0 + s.len; ++i) {
          const double v = Adx(i);
          if (hi0(i) < kInf && v > st.infeas_tol * nrm) return false;
          if (lo0(i) > -kInf && v < -st.infeas_tol * nrm) return false;
        }
      } else if (s.kind == SliceKind::Soc) {
        Eigen::VectorXd seg = Adx.segment(s.row0, s.len);
        Eigen::VectorXd pj = seg;
        soc_project(pj);
        if ((pj - seg).norm() > st.infeas_tol * std::max(nrm, seg.norm())) return false;
      } else {
        const int d = prog.block_dims_[s.block];
        Eigen::VectorXd seg = Adx.segment(s.row0, s.len);
        Eigen::MatrixXcd H = coords_to_herm(seg.data(), d);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(H, Eigen::EigenvaluesOnly);
        if (es.info() != Eigen::Success) return false;
        if (es.eigenvalues()(0) < -st.infeas_tol * std::max(nrm, seg.norm())) return false;
      }
    }
    return true;
  }

  void maybe_adapt_rho(const Residuals& r, int iter) {
    int every = 100;
    double thresh = 5.0;
    if (const char* e = std::getenv("OID_DBG_ADAPT_EVERY")) every = std::atoi(e);
    if (const char* e = std::getenv("OID_DBG_ADAPT_THRESH")) thresh = std::atof(e);
    if (!st.adaptive_rho || iter - last_rho_update < every) return;
    const double rp_rel = r.rp / std::max(r.rp_scale, 1e-30);
    const double rd_rel = r.rd / std::max(r.rd_scale, 1e-30);
    if (rp_rel <= 1e-30 || rd_rel <= 1e-30) return;
    const double ratio = std::sqrt(rp_rel / rd_rel);
    if (ratio > thresh || ratio < 1.0 / thresh) {
      rho_base = std::clamp(rho_base * ratio, 1e-6, 1e6);
      // y is kept; z and the slice geometry are unchanged, only the step sizes move
      build_kkt();
      last_rho_update = iter;
    }
  }

  ConicSolution run() {
    if (!warm) {
      x.setZero();
      z.setZero();
      y.setZero();
    }
    warm = true;
    x_chk = x;
    y_chk = y;
    last_rho_update = 0;

    ConicSolution sol;
    Eigen::VectorXd rhs(n + m), xt(n), nu(m), zt(m), w(m), zprev(m), v(m);
    Residuals r{};
    int performed = 0;
    bool done = false;
    for (int iter = 1; iter <= st.max_iters && !done; ++iter) {
      performed = iter;
      rhs.head(n) = st.sigma * x - qh;
      rhs.tail(m) = z - y.cwiseQuotient(rho);
      Eigen::VectorXd sol_kkt = kkt.solve(rhs);
      xt = sol_kkt.head(n);
      nu = sol_kkt.tail(m);
      zt = z + (nu - y).cwiseQuotient(rho);
      x = st.alpha * xt + (1.0 - st.alpha) * x;
      zprev = z;
      v = st.alpha * zt + (1.0 - st.alpha) * zprev;
      w = v + y.cwiseQuotient(rho);
      z = w;
      project(z);
      y += rho.cwiseProduct(v - z);

      if (iter % st.check_every == 0 || iter == st.max_iters) {
        r = residuals();
        const double ep = st.tol + st.tol * r.rp_scale;
        const double ed = st.tol + st.tol * r.rd_scale;
        const double eg = st.tol + st.tol * std::abs(r.obj);
        if (std::getenv("OID_DBG_TRACE") && iter % 500 == 0)
          std::fprintf(stderr,
                       "it=%6d rp=%.3e(%.1e) rd=%.3e(%.1e) gap=%.3e obj=%.6e rho=%.3e\n",
                       iter, r.rp, r.rp_scale, r.rd, r.rd_scale, r.gap, r.obj, rho_base);
        if (r.rp <= ep && r.rd <= ed && r.gap <= eg) {
          sol.status = SolveStatus::Optimal;
          done = true;
        } else if (primal_infeasible(y - y_chk) || dual_infeasible(x - x_chk)) {
          sol.status = SolveStatus::Infeasible;
          done = true;
        } else {
          maybe_adapt_rho(r, iter);
        }
        x_chk = x;
        y_chk = y;
      }
    }
    if (!done) {
      r = residuals();
      sol.status = SolveStatus::MaxIters;
    }

    sol.iterations = performed;
    sol.primal_residual = r.rp;
    sol.dual_residual = r.rd;
    sol.comp_gap = r.gap;
    sol.objective = r.obj;
    Eigen::VectorXd x0 = dscale.cwiseProduct(x);
    sol.scalars.assign(x0.data(), x0.data() + ns);
    sol.blocks.resize(prog.block_count());
    // blocks are reported from the cone side of the splitting, which is
    // exactly PSD (the x side only matches it to solver tolerance)
    Eigen::VectorXd z0 = z.cwiseQuotient(escale);
    for (const Slice& s : slices)
      if (s.kind == SliceKind::Psd)
        sol.blocks[s.block] = coords_to_herm(z0.data() + s.row0, prog.block_dims_[s.block]);
    sol.row_duals = escale.cwiseProduct(y) / cost_scale;
    return sol;
  }

  void set_scalar_cost(int id, double c) {
    prog.lin_cost_scalar_.at(id) = c;
    q0(id) = c;
    qh(id) = c * dscale(id) * cost_scale;
  }

  void set_block_cost(int b, const Eigen::MatrixXcd& C) {
    const int d = prog.block_dims_.at(b);
    if (C.rows() != d || C.cols() != d) throw ModelError("block cost has wrong dimension");
    if (!is_hermitian(C, 1e-12)) throw ModelError("block cost matrix must be Hermitian");
    prog.lin_cost_block_[b] = C;
    std::vector<double> buf(herm_coord_count(d));
    herm_to_coords(C, buf.data());
    for (int k = 0; k < static_cast<int>(buf.size()); ++k) {
      const int j = block_off[b] + k;
      q0(j) = buf[k];
      qh(j) = buf[k] * dscale(j) * cost_scale;
    }
  }

  void set_soc_c(int soc_id, const std::vector<double>& c) {
    const Slice& s = slices.at(soc_slice_of.at(soc_id));
    if (static_cast<int>(c.size()) != s.len)
      throw ModelError("wrong number of cone constants");
    for (int k = 0; k < s.len; ++k) {
      prog.socs_[soc_id].entries[k].constant = c[k];
      soc_c0(s.row0 + k) = c[k];
      soc_c(s.row0 + k) = c[k] * escale(s.row0 + k);
    }
  }
};

ConicSolver::ConicSolver(ConicProgram p, SolverSettings s)
    : impl_(std::make_unique<Impl>(std::move(p), s)) {}
ConicSolver::~ConicSolver() = default;
ConicSolver::ConicSolver(ConicSolver&&) noexcept = default;
ConicSolver& ConicSolver::operator=(ConicSolver&&) noexcept = default;

void ConicSolver::set_linear_cost(ScalarVar v, double c) { impl_->set_scalar_cost(v.id, c); }
void ConicSolver::set_linear_cost(BlockVar b, const Eigen::MatrixXcd& C) {
  impl_->set_block_cost(b.id, C);
}
void ConicSolver::set_soc_constants(SocRef s, const std::vector<double>& c) {
  impl_->set_soc_c(s.id, c);
}
ConicSolution ConicSolver::solve() { return impl_->run(); }
void ConicSolver::reset_start() { impl_->reset(); }
const ConicProgram& ConicSolver::program() const { return impl_->prog; }

ConicSolution solve(const ConicProgram& p, double tol, int max_iters) {
  SolverSettings st;
  st.tol = tol;
  st.max_iters = max_iters;
  ConicSolver s(p, st);
  return s.solve();
}

}  // namespace oid
