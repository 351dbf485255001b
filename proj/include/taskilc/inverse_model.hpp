#pragma once

// Critical-point inverse model: a QP that maps the measured rope error at t_c into a command update.
//
// Sign convention (the only place it is defined): the QP variable Delta u is *subtracted* from the
// command, u_{k+1} = u_k - Delta u. The rope prediction Delta x = M Delta u therefore tracks +x_err,
// and every term that is linearised in the command (follow-through error, joint limits, torque) is
// written for u_k - Delta u.

#include <Eigen/Dense>

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskilc/arm_model.hpp"
#include "taskilc/demonstration.hpp"
#include "taskilc/qp.hpp"
#include "taskilc/system_model.hpp"

namespace taskilc {

struct QpWeights {
  double w_control = 0.5;
  double w_critical_pos = 25.0;
  double w_critical_vel = 0.00375;
  double w_pc = 100.0;
  double w_vc = 0.1;
  double w_Rc = 5.0;
  double w_pft = 1.0;
  double w_vft = 0.1;
  double w_Rft = 0.1;
  double w_ft_velocity = 0.5;

  void validate() const {
    for (double w : {w_control, w_critical_pos, w_critical_vel, w_pc, w_vc, w_Rc, w_pft, w_vft, w_Rft, w_ft_velocity})
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("qp weights must be finite and nonnegative");
  }

  /// diag(w_pos I_3N, w_vel I_3N)
  VecX critical_weights(int N) const {
    VecX q(6 * N);
    q.head(3 * N).setConstant(w_critical_pos);
    q.tail(3 * N).setConstant(w_critical_vel);
    return q;
  }
};

struct InverseModelOptions {
  int limit_samples = 0;    // 0: every command sample (250 Hz); otherwise uniform count incl. endpoints
  int torque_samples = 16;
  bool equal_weighted = false;
  int equal_stride = 4;     // rope-grid stride of the extra samples in equal-weighted mode
  bool equal_average = true;  // equal-weighted rope terms share the critical-point weight instead of adding to it
  double bound_margin = 1e-6;
  bool rest_boundaries = true;  // the update leaves the joint rates at t = 0 and t = T unchanged
  QpOptions solver;
};

// --- follow-through ----------------------------------------------------------------------------

/// End-effector error e = [p_tip - p_h; Log(R_h^T R_tip); v_tip - v_h] and its 9 x 80 knot Jacobian.
struct TipError {
  Eigen::Matrix<double, 9, 1> e;
  Eigen::Matrix<double, 9, kKnotParams> J;
};

inline TipError tip_error(const ChainSpec& chain, const CommandSpline& c, double t, const HandPose& h) {
  const ConfigVec q = eval_spline(c, t, 0), qd = eval_spline(c, t, 1);
  const auto pose = forward_kinematics(chain, q, qd);
  const auto B0 = spline_knot_jacobian_dense(c, t, 0);
  const auto B1 = spline_knot_jacobian_dense(c, t, 1);
  const TipJacobian Jt = tip_jacobian(chain, q);
  TipError out;
  const Vec3 eR = so3_log(h.rotation.transpose() * pose.rotation);
  out.e << pose.position - h.position, eR, pose.velocity - h.velocity;
  out.J.topRows<3>() = Jt.topRows<3>() * B0;
  out.J.middleRows<3>(3) = so3_right_jacobian_inv(eR) * pose.rotation.transpose() * Jt.bottomRows<3>() * B0;
  // d(J(q) qd)/dq by central differences on the configuration
  Eigen::Matrix<double, 3, kChannels> dv_dq;
  const double step = 1e-6;
  for (int i = 0; i < kChannels; ++i) {
    ConfigVec up = q, dn = q;
    up[i] += step;
    dn[i] -= step;
    dv_dq.col(i) = (tip_jacobian(chain, up).topRows<3>() * qd - tip_jacobian(chain, dn).topRows<3>() * qd) / (2 * step);
  }
  out.J.bottomRows<3>() = Jt.topRows<3>() * B1 + dv_dq * B0;
  return out;
}

struct FollowThroughTerm {
  double time = 0.0;
  Eigen::Matrix<double, kKnotParams, kKnotParams> Q;  // J^T W J
  Eigen::Matrix<double, kKnotParams, 1> b;            // 2 J^T W e
  double constant = 0.0;                              // e^T W e
  bool critical = false;
};

/// Times at which the follow-through cost applies: t_c itself, then command samples after it.
inline std::vector<double> follow_through_times(double t_c, double T, double rate = kCommandRate) {
  std::vector<double> out = {t_c};
  for (double t : time_grid(T, 1.0 / rate))
    if (t > t_c + 1e-9) out.push_back(t);
  return out;
}

/// Additive-form quadratic model around the current command: for a change d of the knots,
/// |e(u + d)|_W^2 ~ d'Qd + b'd + constant.
inline std::vector<FollowThroughTerm> build_follow_through_cost(const ChainSpec& chain, const CommandSpline& c,
                                                                const Demonstration& demo, double t_c,
                                                                const QpWeights& w) {
  require(t_c < c.duration, "follow-through: t_c must precede the end of the command");
  std::vector<FollowThroughTerm> out;
  for (double t : follow_through_times(t_c, c.duration)) {
    const bool crit = std::abs(t - t_c) < 1e-12;
    const double wp = crit ? w.w_pc : w.w_pft, wR = crit ? w.w_Rc : w.w_Rft, wv = crit ? w.w_vc : w.w_vft;
    Eigen::Matrix<double, 9, 1> W;
    W << wp, wp, wp, wR, wR, wR, wv, wv, wv;
    const auto te = tip_error(chain, c, t, demo.hand_at(std::min(t, demo.T)));
    FollowThroughTerm term;
    term.time = t;
    term.critical = crit;
    term.Q = te.J.transpose() * W.asDiagonal() * te.J;
    term.b = 2.0 * te.J.transpose() * W.cwiseProduct(te.e);
    term.constant = te.e.dot(W.cwiseProduct(te.e));
    out.push_back(term);
  }
  return out;
}

// --- QP assembly -------------------------------------------------------------------------------

/// Uniform sample times over [0, T]; `count == 0` gives the command grid.
inline std::vector<double> collocation_times(double T, int count) {
  if (count <= 0) return time_grid(T, 1.0 / kCommandRate);
  if (count == 1) return {0.0};
  std::vector<double> t(count);
  for (int i = 0; i < count; ++i) t[i] = T * i / (count - 1);
  t.back() = T;
  return t;
}

/// Torque prediction linearised in the knots at time t: tau(u) and d tau / d u (7 x 80).
inline std::pair<JointVec, Eigen::Matrix<double, kArmJoints, kKnotParams>> torque_linearization(
    const ChainSpec& chain, const CommandSpline& c, double t) {
  const JointVec q = eval_spline(c, t, 0).head<kArmJoints>();
  const JointVec qd = eval_spline(c, t, 1).head<kArmJoints>();
  const JointVec qdd = eval_spline(c, t, 2).head<kArmJoints>();
  const JointVec tau = inverse_dynamics(chain, q, qd, qdd);
  Eigen::Matrix<double, kArmJoints, kArmJoints> dq, dqd, dqdd;
  const double h = 1e-6;
  const JointVec tau_no_acc = inverse_dynamics(chain, q, qd, JointVec::Zero());
  for (int i = 0; i < kArmJoints; ++i) {
    const JointVec e = JointVec::Unit(i);
    dq.col(i) = (inverse_dynamics(chain, q + h * e, qd, qdd) - inverse_dynamics(chain, q - h * e, qd, qdd)) / (2 * h);
    dqd.col(i) = (inverse_dynamics(chain, q, qd + h * e, qdd) - inverse_dynamics(chain, q, qd - h * e, qdd)) / (2 * h);
    dqdd.col(i) = inverse_dynamics(chain, q, qd, e) - tau_no_acc;
  }
  Eigen::Matrix<double, kArmJoints, kKnotParams> J;
  J = dq * spline_knot_jacobian_dense(c, t, 0).topRows<kArmJoints>() +
      dqd * spline_knot_jacobian_dense(c, t, 1).topRows<kArmJoints>() +
      dqdd * spline_knot_jacobian_dense(c, t, 2).topRows<kArmJoints>();
  return {tau, J};
}

/// Extra rope targets for the equal-weighted objective.
struct ExtraTarget {
  MatX M;     // 6N x 80
  VecX error; // measured minus demonstrated state at that time
};

struct InverseQp {
  QpProblem problem;
  int knot_vars = kKnotParams;
  int state_vars = 0;
  int limit_rows = 0;
  int torque_rows = 0;
  bool zero_feasible = true;  // the current command satisfies every bound
  double objective_at_zero = 0.0;
};

inline InverseQp build_qp(const VecX& x_err, const MatX& M, const std::vector<FollowThroughTerm>& ft,
                          const ChainSpec& chain, const CommandSpline& c, const JointLimits& limits,
                          const QpWeights& w, const InverseModelOptions& opt = {},
                          const std::vector<ExtraTarget>& extra = {}) {
  const int nx = static_cast<int>(x_err.size());
  if (M.rows() != nx || M.cols() != kKnotParams) throw ConfigError("build_qp: M must be 6N x 80 matching the error");
  if (nx % 6 != 0) throw ConfigError("build_qp: rope state size must be a multiple of 6");
  const int nu = kKnotParams;
  const int n = nu + nx;
  const double share = opt.equal_average && !extra.empty() ? 1.0 / static_cast<double>(extra.size() + 1) : 1.0;
  const VecX Qd = share * w.critical_weights(nx / 6);

  InverseQp out;
  out.state_vars = nx;
  QpProblem& p = out.problem;
  p.P = MatX::Zero(n, n);
  p.q = VecX::Zero(n);

  // |dx - x_err|_Q^2
  p.P.bottomRightCorner(nx, nx).diagonal() = 2.0 * Qd;
  p.q.tail(nx) = -2.0 * Qd.cwiseProduct(x_err);
  p.constant = x_err.dot(Qd.cwiseProduct(x_err));

  // control regulariser on the 7 arm channels of every knot
  for (int ch = 0; ch < kArmJoints; ++ch)
    for (int j = 0; j < kKnots; ++j) p.P(ch * kKnots + j, ch * kKnots + j) += 2.0 * w.w_control;

  // follow-through, evaluated for u - du: du'Q du - b'du
  for (const auto& term : ft) {
    p.P.topLeftCorner(nu, nu) += 2.0 * term.Q;
    p.q.head(nu) -= term.b;
    p.constant += term.constant;
    if (!term.critical && w.w_ft_velocity > 0.0) {
      const auto B1 = spline_knot_jacobian_dense(c, term.time, 1).topRows<kArmJoints>();
      p.P.topLeftCorner(nu, nu) += 2.0 * w.w_ft_velocity * B1.transpose() * B1;
    }
  }

  // equal-weighted extra samples, condensed onto the knots
  for (const auto& ex : extra) {
    p.P.topLeftCorner(nu, nu) += 2.0 * ex.M.transpose() * Qd.asDiagonal() * ex.M;
    p.q.head(nu) -= 2.0 * ex.M.transpose() * Qd.cwiseProduct(ex.error);
    p.constant += ex.error.dot(Qd.cwiseProduct(ex.error));
  }
  p.P = 0.5 * (p.P + p.P.transpose()).eval();

  // equalities: dx - M du = 0, base rows of du = 0
  RowBuilder eq(n);
  for (int r = 0; r < nx; ++r) {
    const int row = eq.add_row(0.0);
    eq.add(row, nu + r, 1.0);
    for (int col = 0; col < nu; ++col) eq.add(row, col, -M(r, col));
  }
  for (int ch = kArmJoints; ch < kChannels; ++ch)
    for (int j = 0; j < kKnots; ++j) eq.add(eq.add_row(0.0), ch * kKnots + j, 1.0);
  if (opt.rest_boundaries)
    for (int ch = 0; ch < kArmJoints; ++ch)
      for (int j : {0, kKnots - 2}) {
        const int row = eq.add_row(0.0);
        eq.add(row, ch * kKnots + j, 1.0);
        eq.add(row, ch * kKnots + j + 1, -1.0);
      }
  p.A = eq.matrix();
  p.b = eq.rhs();

  // inequalities on B(u - du): value - a'du <= hi  and  -(value - a'du) <= -lo
  // Exact (spline) rows must already hold at du = 0. Linearised torque rows that the current command
  // violates stay in the problem and ask the update to repair them.
  RowBuilder in(n);
  auto bound_pair = [&](double value, double lo, double hi, const auto& coeff_row, int first_col, bool exact) {
    auto margin = [&](double bound) { return opt.bound_margin * (1.0 + std::abs(bound)); };
    auto rhs = [&](double slack, double bound) {
      if (slack < -margin(bound) && exact) out.zero_feasible = false;
      return slack >= 0.0 ? std::max(slack - margin(bound), 0.5 * slack) : slack - margin(bound);
    };
    if (std::isfinite(hi)) {
      const int row = in.add_row(rhs(hi - value, hi));
      for (int k = 0; k < coeff_row.size(); ++k) in.add(row, first_col + k, -coeff_row[k]);
    }
    if (std::isfinite(lo)) {
      const int row = in.add_row(rhs(value - lo, lo));
      for (int k = 0; k < coeff_row.size(); ++k) in.add(row, first_col + k, coeff_row[k]);
    }
  };
  const std::array<const JointVec*, 3> lo = {&limits.q_min, &limits.qd_min, &limits.qdd_min};
  const std::array<const JointVec*, 3> hi = {&limits.q_max, &limits.qd_max, &limits.qdd_max};
  for (double t : collocation_times(c.duration, opt.limit_samples)) {
    for (int order = 0; order <= 2; ++order) {
      const auto wts = spline_basis_weights(t, c.duration, order);
      const ChannelVec val = c.knots * wts;
      for (int j = 0; j < kArmJoints; ++j) bound_pair(val[j], (*lo[order])[j], (*hi[order])[j], wts, j * kKnots, true);
    }
  }
  out.limit_rows = in.rows();
  if (opt.torque_samples > 0) {
    for (double t : collocation_times(c.duration, std::max(opt.torque_samples, 2))) {
      const auto [tau, Jt] = torque_linearization(chain, c, t);
      for (int j = 0; j < kArmJoints; ++j) {
        const Eigen::Matrix<double, kKnotParams, 1> row = Jt.row(j).transpose();
        bound_pair(tau[j], limits.tau_min[j], limits.tau_max[j], row, 0, false);
      }
    }
  }
  out.torque_rows = in.rows() - out.limit_rows;
  p.C = in.matrix();
  p.h = in.rhs();
  out.objective_at_zero = p.constant;
  return out;
}

// --- solve -------------------------------------------------------------------------------------

struct CommandUpdate {
  KnotMatrix delta_u = KnotMatrix::Zero();  // apply as u - delta_u
  VecX delta_x;                             // predicted rope change at t_c
  QpStatus status = QpStatus::MaxIterations;
  double objective = 0.0;
  double objective_at_zero = 0.0;
  double kkt_residual = 0.0;
  int iterations = 0;
};

inline CommandUpdate solve_inverse_qp(const InverseQp& qp, const QpOptions& opt = {}) {
  CommandUpdate up;
  up.objective_at_zero = qp.objective_at_zero;
  if (!qp.zero_feasible) {
    up.status = QpStatus::Infeasible;
    up.delta_x = VecX::Zero(qp.state_vars);
    return up;
  }
  const auto sol = solve_qp(qp.problem, opt);
  up.status = sol.status;
  up.objective = sol.objective;
  up.kkt_residual = sol.kkt_residual;
  up.iterations = sol.iterations;
  KnotVec flat = sol.x.head(kKnotParams);
  for (int ch = kArmJoints; ch < kChannels; ++ch) flat.segment<kKnots>(ch * kKnots).setZero();
  up.delta_u = CommandSpline::from_flat(flat, 1.0).knots;
  up.delta_x = sol.x.tail(qp.state_vars);
  return up;
}

struct InverseModelContext {
  ChainSpec chain;
  CommandSpline command;
  RopeParams rope;
  const Demonstration* demo = nullptr;
  JointLimits limits = JointLimits::defaults();
  QpWeights weights;
  InverseModelOptions options;
};

/// Rope-grid times used as extra targets by the equal-weighted objective (strictly before t_c).
inline std::vector<double> equal_weight_times(double t_c, double dt, int stride) {
  std::vector<double> out;
  for (int k = stride; k * dt < t_c - 1e-9; k += stride) out.push_back(k * dt);
  return out;
}

struct InverseModelResult {
  CommandUpdate update;
  LinearizedSystem linearization;
  InverseQp qp;
};

/// Full inverse model. `extra_errors` supplies measured-minus-demo states at equal_weight_times
/// when the equal-weighted objective is enabled.
inline InverseModelResult inverse_model(const VecX& x_err, const InverseModelContext& ctx,
                                        const std::vector<VecX>& extra_errors = {}) {
  require(ctx.demo != nullptr, "inverse_model: demonstration required");
  const Demonstration& demo = *ctx.demo;
  RopeModel model(ctx.rope);
  std::vector<double> extra_times;
  if (ctx.options.equal_weighted) {
    extra_times = equal_weight_times(demo.t_c, ctx.rope.dt, ctx.options.equal_stride);
    require(extra_errors.size() == extra_times.size(), "inverse_model: equal-weighted errors missing");
  }
  InverseModelResult r;
  r.linearization = linearize_system(ctx.chain, ctx.command, model, demo.t_c, extra_times);
  const auto ft = build_follow_through_cost(ctx.chain, ctx.command, demo, demo.t_c, ctx.weights);
  std::vector<ExtraTarget> extra;
  for (std::size_t i = 0; i < extra_times.size(); ++i) extra.push_back({r.linearization.M_extra[i], extra_errors[i]});
  r.qp = build_qp(x_err, r.linearization.M, ft, ctx.chain, ctx.command, ctx.limits, ctx.weights, ctx.options, extra);
  r.update = solve_inverse_qp(r.qp, ctx.options.solver);
  return r;
}

// --- debug dump --------------------------------------------------------------------------------

inline nlohmann::json qp_to_json(const QpProblem& p) {
  auto dense = [](const MatX& m) {
    auto rows = nlohmann::json::array();
    for (int i = 0; i < m.rows(); ++i) {
      auto r = nlohmann::json::array();
      for (int j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
      rows.push_back(r);
    }
    return rows;
  };
  auto sparse = [](const SparseRows& m) {
    nlohmann::json j;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    auto trip = nlohmann::json::array();
    for (int r = 0; r < m.outerSize(); ++r)
      for (SparseRows::InnerIterator it(m, r); it; ++it) trip.push_back({it.row(), it.col(), it.value()});
    j["triplets"] = trip;
    return j;
  };
  auto vec = [](const VecX& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j;
  j["form"] = "minimize 0.5 x'Px + q'x + constant s.t. A x = b, C x <= h";
  j["P"] = dense(p.P);
  j["q"] = vec(p.q);
  j["constant"] = p.constant;
  j["A"] = sparse(p.A);
  j["b"] = vec(p.b);
  j["C"] = sparse(p.C);
  j["h"] = vec(p.h);
  return j;
}

inline void dump_qp(const QpProblem& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << qp_to_json(p).dump() << "\n";
}

}  // namespace taskilc
