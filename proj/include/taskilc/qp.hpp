#pragma once

// Convex QP by a primal-dual interior point method (Mehrotra predictor-corrector):
//
//   minimize 1/2 x'Px + q'x   subject to  A x = b,  C x <= h.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "taskilc/common.hpp"

namespace taskilc {

using SparseRows = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct QpProblem {
  MatX P;      // n x n, symmetric positive semidefinite
  VecX q;      // n
  SparseRows A;  // equalities
  VecX b;
  SparseRows C;  // inequalities C x <= h
  VecX h;
  double constant = 0.0;  // added to the reported objective

  int variables() const { return static_cast<int>(q.size()); }

  void validate() const {
    const auto n = q.size();
    if (P.rows() != n || P.cols() != n) throw ConfigError("qp: Hessian size mismatch");
    if (A.rows() != b.size() || (A.rows() > 0 && A.cols() != n)) throw ConfigError("qp: equality size mismatch");
    if (C.rows() != h.size() || (C.rows() > 0 && C.cols() != n)) throw ConfigError("qp: inequality size mismatch");
  }

  double objective(const VecX& x) const { return 0.5 * x.dot(P * x) + q.dot(x) + constant; }
};

enum class QpStatus { Optimal, MaxIterations, Infeasible };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return "optimal";
    case QpStatus::MaxIterations: return "max-iter";
    case QpStatus::Infeasible: return "infeasible";
  }
  return "?";
}

struct QpSolution {
  VecX x, y, z, s;  // primal, equality duals, inequality duals, slacks
  QpStatus status = QpStatus::MaxIterations;
  int iterations = 0;
  double objective = 0.0;
  double kkt_residual = std::numeric_limits<double>::infinity();
};

struct QpOptions {
  double tolerance = 1e-9;
  int max_iterations = 100;
};

/// Scaled KKT residual: stationarity, primal feasibility and complementarity, each normalised by the
/// size of the terms that make it up.
inline double kkt_residual(const QpProblem& p, const VecX& x, const VecX& y, const VecX& z) {
  auto inf = [](const VecX& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; };
  const VecX Px = p.P * x;
  const VecX Aty = p.A.rows() ? VecX(p.A.transpose() * y) : VecX::Zero(x.size());
  const VecX Ctz = p.C.rows() ? VecX(p.C.transpose() * z) : VecX::Zero(x.size());
  const double stat = inf(Px + p.q + Aty + Ctz) / (1.0 + std::max({inf(Px), inf(p.q), inf(Aty), inf(Ctz)}));
  double eq = 0.0, ineq = 0.0, comp = 0.0, dual = 0.0;
  if (p.A.rows()) {
    const VecX Ax = p.A * x;
    eq = inf(Ax - p.b) / (1.0 + std::max(inf(Ax), inf(p.b)));
  }
  if (p.C.rows()) {
    const VecX Cx = p.C * x;
    const VecX slack = p.h - Cx;
    ineq = std::max(0.0, -slack.minCoeff()) / (1.0 + std::max(inf(Cx), inf(p.h)));
    dual = std::max(0.0, -z.minCoeff());
    comp = inf(slack.cwiseMax(0.0).cwiseProduct(z)) / (1.0 + std::abs(p.objective(x) - p.constant));
  }
  return std::max({stat, eq, ineq, comp, dual});
}

namespace qp_detail {

inline double max_step(const VecX& v, const VecX& dv) {
  double a = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (dv[i] < 0.0) a = std::min(a, -v[i] / dv[i]);
  return a;
}

/// Re-solves the KKT system with the constraints the interior point left active held as equalities.
/// Kept only if it is feasible, dual feasible and at least as accurate.
inline void polish(const QpProblem& p, QpSolution& sol) {
  const int n = p.variables();
  const int me = static_cast<int>(p.A.rows());
  std::vector<int> active;
  for (int i = 0; i < sol.z.size(); ++i)
    if (sol.z[i] > sol.s[i]) active.push_back(i);
  const int ma = static_cast<int>(active.size());
  if (n + me + ma > 4000) return;
  const MatX C(p.C);
  MatX G(me + ma, n);
  VecX g(me + ma);
  if (me) {
    G.topRows(me) = MatX(p.A);
    g.head(me) = p.b;
  }
  for (int k = 0; k < ma; ++k) {
    G.row(me + k) = C.row(active[k]);
    g[me + k] = p.h[active[k]];
  }
  const double delta = 1e-12 * std::max(1.0, p.P.cwiseAbs().maxCoeff());
  MatX K = MatX::Zero(n + me + ma, n + me + ma);
  K.topLeftCorner(n, n) = p.P;
  K.topLeftCorner(n, n).diagonal().array() += delta;
  K.bottomLeftCorner(me + ma, n) = G;
  K.topRightCorner(n, me + ma) = G.transpose();
  K.bottomRightCorner(me + ma, me + ma).diagonal().setConstant(-delta);
  VecX rhs(n + me + ma);
  rhs.head(n) = -p.q;
  rhs.tail(me + ma) = g;
  const Eigen::PartialPivLU<MatX> lu(K);
  VecX v = lu.solve(rhs);
  MatX Kt = K;  // refinement against the unregularised system
  Kt.topLeftCorner(n, n).diagonal().array() -= delta;
  Kt.bottomRightCorner(me + ma, me + ma).setZero();
  for (int it = 0; it < 3; ++it) v += lu.solve(rhs - Kt * v);
  if (!v.allFinite()) return;

  QpSolution cand = sol;
  cand.x = v.head(n);
  cand.y = v.segment(n, me);
  cand.z.setZero();
  for (int k = 0; k < ma; ++k) cand.z[active[k]] = v[n + me + k];
  cand.s = (p.h - C * cand.x).cwiseMax(0.0);
  const double tol = 1e-12 * (1.0 + (p.h.size() ? p.h.cwiseAbs().maxCoeff() : 0.0));
  if (ma && cand.z.minCoeff() < 0.0) return;
  if (sol.z.size() && (C * cand.x - p.h).maxCoeff() > tol) return;
  cand.kkt_residual = kkt_residual(p, cand.x, cand.y, cand.z);
  if (cand.kkt_residual <= sol.kkt_residual) sol = std::move(cand);
}

}  // namespace qp_detail

inline QpSolution solve_qp(const QpProblem& p, const QpOptions& opt = {}) {
  p.validate();
  const int n = p.variables();
  const int me = static_cast<int>(p.A.rows());
  const int mi = static_cast<int>(p.C.rows());
  const SparseRows& Cd = p.C;
  const SparseRows& Ad = p.A;
  const SparseRows Ct = p.C.transpose();

  QpSolution sol;
  sol.x = VecX::Zero(n);
  sol.y = VecX::Zero(me);
  sol.z = VecX::Ones(mi);
  sol.s = VecX::Ones(mi);

  const double reg = 1e-11 * std::max(1.0, p.P.cwiseAbs().maxCoeff());
  MatX K(n + me, n + me);
  auto factor = [&](const VecX& w) {
    K.setZero();
    K.topLeftCorner(n, n) = p.P;
    if (mi) {
      const SparseRows CtWC = Ct * w.asDiagonal() * Cd;
      K.topLeftCorner(n, n) += MatX(CtWC);
    }
    K.topLeftCorner(n, n).diagonal().array() += reg;
    if (me) {
      K.bottomLeftCorner(me, n) = MatX(Ad);
      K.topRightCorner(n, me) = K.bottomLeftCorner(me, n).transpose();
      K.bottomRightCorner(me, me).diagonal().setConstant(-reg);
    }
    return Eigen::PartialPivLU<MatX>(K);
  };
  // a few refinement sweeps against the unregularised system
  auto solve = [&](const Eigen::PartialPivLU<MatX>& lu, const VecX& w, const VecX& rhs) {
    VecX sol_ = lu.solve(rhs);
    for (int it = 0; it < 2; ++it) {
      VecX r = rhs;
      r.head(n) -= p.P * sol_.head(n);
      if (mi) r.head(n) -= Ct * VecX(w.cwiseProduct(Cd * sol_.head(n)));
      if (me) {
        r.head(n) -= Ad.transpose() * sol_.tail(me);
        r.tail(me) -= Ad * sol_.head(n);
      }
      sol_ += lu.solve(r);
    }
    return sol_;
  };

  // initial point: equality-constrained minimiser with unit barrier weights, slacks shifted positive
  {
    const VecX w = VecX::Ones(mi);
    auto lu = factor(w);
    VecX rhs(n + me);
    rhs.head(n) = -p.q;
    if (mi) rhs.head(n) += Ct * p.h;
    if (me) rhs.tail(me) = p.b;
    const VecX xy = solve(lu, w, rhs);
    sol.x = xy.head(n);
    if (me) sol.y = xy.tail(me);
    if (mi) {
      const VecX s0 = p.h - Cd * sol.x;
      const double shift = std::max(0.0, -s0.minCoeff());
      sol.s = (s0.array() + shift + 1.0).matrix();
      sol.z = VecX::Ones(mi);
    }
  }

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    sol.iterations = iter + 1;
    const VecX rd = p.P * sol.x + p.q + (me ? VecX(Ad.transpose() * sol.y) : VecX::Zero(n)) +
                    (mi ? VecX(Ct * sol.z) : VecX::Zero(n));
    const VecX rp = me ? VecX(Ad * sol.x - p.b) : VecX();
    const VecX ri = mi ? VecX(Cd * sol.x + sol.s - p.h) : VecX();
    const double mu = mi ? sol.s.dot(sol.z) / mi : 0.0;

    sol.kkt_residual = kkt_residual(p, sol.x, sol.y, sol.z);
    const double ri_scaled = mi ? ri.cwiseAbs().maxCoeff() / (1.0 + p.h.cwiseAbs().maxCoeff()) : 0.0;
    if (sol.kkt_residual <= opt.tolerance && ri_scaled <= opt.tolerance &&
        mu <= opt.tolerance * (1.0 + std::abs(p.objective(sol.x) - p.constant))) {
      sol.status = QpStatus::Optimal;
      qp_detail::polish(p, sol);
      break;
    }

    const VecX w = mi ? VecX(sol.z.cwiseQuotient(sol.s)) : VecX();
    const auto lu = factor(w);
    if (!(lu.rcond() > 1e-300)) break;

    // direction for complementarity target r_c = s.z - sigma mu (+ second-order term)
    auto direction = [&](const VecX& rc, VecX& dx, VecX& dy, VecX& dz, VecX& ds) {
      VecX rhs(n + me);
      rhs.head(n) = -rd;
      if (mi) rhs.head(n) -= Ct * VecX(w.cwiseProduct(ri) - rc.cwiseQuotient(sol.s));
      if (me) rhs.tail(me) = -rp;
      const VecX sol_ = solve(lu, w, rhs);
      dx = sol_.head(n);
      dy = me ? VecX(sol_.tail(me)) : VecX();
      if (mi) {
        dz = w.cwiseProduct(Cd * dx + ri) - rc.cwiseQuotient(sol.s);
        ds = -(rc + sol.s.cwiseProduct(dz)).cwiseQuotient(sol.z);
      }
    };

    VecX dx, dy, dz, ds;
    if (mi) {
      const VecX rc_aff = sol.s.cwiseProduct(sol.z);
      direction(rc_aff, dx, dy, dz, ds);
      const double a_aff = std::min(qp_detail::max_step(sol.s, ds), qp_detail::max_step(sol.z, dz));
      const double mu_aff = (sol.s + a_aff * ds).dot(sol.z + a_aff * dz) / mi;
      const double sigma = std::pow(std::clamp(mu_aff / std::max(mu, 1e-300), 0.0, 1.0), 3);
      const VecX rc = rc_aff + ds.cwiseProduct(dz) - VecX::Constant(mi, sigma * mu);
      direction(rc, dx, dy, dz, ds);
      const double a = std::min(1.0, 0.99 * std::min(qp_detail::max_step(sol.s, ds), qp_detail::max_step(sol.z, dz)));
      sol.x += a * dx;
      if (me) sol.y += a * dy;
      sol.z += a * dz;
      sol.s += a * ds;
    } else {
      direction(VecX(), dx, dy, dz, ds);
      sol.x += dx;
      if (me) sol.y += dy;
    }
    if (!sol.x.allFinite()) break;
  }

  sol.objective = p.objective(sol.x);
  if (sol.status != QpStatus::Optimal) {
    // persistent primal infeasibility with exploding duals signals an infeasible problem
    const double viol = mi ? std::max(0.0, (Cd * sol.x - p.h).maxCoeff()) : 0.0;
    const double eq = me ? (Ad * sol.x - p.b).cwiseAbs().maxCoeff() : 0.0;
    if (!sol.x.allFinite() || viol > 1e-6 * (1.0 + p.h.cwiseAbs().maxCoeff()) || eq > 1e-6 * (1.0 + p.b.cwiseAbs().maxCoeff()))
      sol.status = QpStatus::Infeasible;
  }
  return sol;
}

/// Builds a row-major sparse matrix from triplets.
class RowBuilder {
 public:
  explicit RowBuilder(int cols) : cols_(cols) {}

  int add_row(double rhs) {
    rhs_.push_back(rhs);
    return rows_++;
  }
  void add(int row, int col, double v) {
    if (v != 0.0) trip_.emplace_back(row, col, v);
  }
  int rows() const { return rows_; }

  SparseRows matrix() const {
    SparseRows m(rows_, cols_);
    m.setFromTriplets(trip_.begin(), trip_.end());
    return m;
  }
  VecX rhs() const { return Eigen::Map<const VecX>(rhs_.data(), static_cast<Eigen::Index>(rhs_.size())); }

 private:
  int cols_;
  int rows_ = 0;
  std::vector<Eigen::Triplet<double>> trip_;
  std::vector<double> rhs_;
};

}  // namespace taskilc
