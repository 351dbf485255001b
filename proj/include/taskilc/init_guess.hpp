#pragma once

// Initial command: track the demonstrated hand trajectory under joint limits by sequential QPs.

#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "taskilc/arm_model.hpp"
#include "taskilc/curvekit.hpp"
#include "taskilc/demo_io.hpp"
#include "taskilc/demonstration.hpp"
#include "taskilc/inverse_model.hpp"
#include "taskilc/qp.hpp"

namespace taskilc {

struct TrackingWeights {
  double w_p = 10.0;
  double w_R = 0.2;
  double w_v = 0.5;
  double w_j = 5e-7;  // jerk
  double z_min = 1.2;  // m, fingertip height at the start

  void validate() const {
    if (!(w_p >= 0 && w_R >= 0 && w_v >= 0 && w_j >= 0)) throw ConfigError("tracking weights must be >= 0");
    if (!std::isfinite(z_min)) throw ConfigError("tracking z_min must be finite");
  }
};

struct TrackingOptions {
  int max_iterations = 50;
  double relative_tolerance = 1e-6;
  double error_ceiling = std::numeric_limits<double>::infinity();  // NoProgress above this objective
  int samples = 0;        // tracking and limit samples; 0: every command sample
  double damping = 1e-8;  // Levenberg term on the knot step
  double bound_margin = 1e-6;
  QpOptions solver;
};

struct TrackingResult {
  CommandSpline command;
  double objective = 0.0;
  int iterations = 0;
  std::vector<double> history;  // objective of every accepted iterate, starting with the initial one
};

class NoProgress : public std::runtime_error {
 public:
  NoProgress(const std::string& what, TrackingResult best) : std::runtime_error(what), result(std::move(best)) {}
  TrackingResult result;
};

inline JointVec ready_pose() {
  JointVec q;
  q << 0.0, 0.6, 0.0, 1.4, 0.0, 0.6, 0.0;
  return q;
}

/// Damped least-squares position IK over the arm joints; the base stays where it is.
inline ConfigVec damped_ik(const ChainSpec& chain, const Vec3& target, ConfigVec q, const JointLimits& limits,
                           int iterations = 200, double lambda = 0.05) {
  for (int it = 0; it < iterations; ++it) {
    const Vec3 e = target - tip_position(chain, q);
    if (e.norm() < 1e-9) break;
    const Eigen::Matrix<double, 3, kArmJoints> J = tip_jacobian(chain, q).topLeftCorner<3, kArmJoints>();
    const Mat3 JJ = J * J.transpose() + lambda * lambda * Mat3::Identity();
    q.head<kArmJoints>() += J.transpose() * JJ.ldlt().solve(e);
    q.head<kArmJoints>() = q.head<kArmJoints>().cwiseMax(limits.q_min).cwiseMin(limits.q_max);
  }
  return q;
}

namespace init_detail {

inline constexpr std::array<double, kKnots> kRestToRest = {0.0, 0.0, 0.05, 0.3, 0.7, 0.95, 1.0, 1.0};

inline bool within_limits(const ChainSpec& chain, const CommandSpline& c, const JointLimits& limits) {
  JointTrajectory tr = sample_command(chain, c);
  tr.tau.resize(0, 0);
  return check_limits(tr, limits).empty();
}

inline void pin_boundary_rates(CommandSpline& c) {
  for (int ch = 0; ch < kChannels; ++ch) {
    c.knots(ch, 1) = c.knots(ch, 0);
    c.knots(ch, kKnots - 2) = c.knots(ch, kKnots - 1);
  }
}

}  // namespace init_detail

/// Joint-space straight line from the ready pose to the IK solution for the final hand position; the
/// base is placed so that the ready pose starts at the first hand sample.
inline CommandSpline initial_command(const Demonstration& demo, const ChainSpec& chain, const JointLimits& limits,
                                     const TrackingWeights& w) {
  ConfigVec qa = ConfigVec::Zero();
  qa.head<kArmJoints>() = ready_pose();
  const Vec3 h0 = demo.hand_at(0.0).position;
  qa.tail<kBaseDofs>() = h0 - tip_position(chain, qa);
  const double z0 = tip_position(chain, qa).z();
  if (z0 < w.z_min) qa[kChannels - 1] += w.z_min - z0 + 1e-3;
  ConfigVec qb = damped_ik(chain, demo.hand_at(demo.T).position, qa, limits);
  CommandSpline c;
  c.duration = demo.T;
  for (int shrink = 0; shrink < 30; ++shrink) {
    for (int j = 0; j < kKnots; ++j) c.knots.col(j) = qa + (qb - qa) * init_detail::kRestToRest[j];
    if (init_detail::within_limits(chain, c, limits)) return c;
    qb = qa + 0.5 * (qb - qa);
  }
  for (int j = 0; j < kKnots; ++j) c.knots.col(j) = qa;
  return c;
}

struct TrackingSample {
  double time;
  double position_error;
  double rotation_error;
  double velocity_error;
};

inline std::vector<double> tracking_times(double T, int samples) { return collocation_times(T, samples); }

inline double tracking_objective(const Demonstration& demo, const ChainSpec& chain, const CommandSpline& c,
                                 const TrackingWeights& w, const std::vector<double>& times) {
  double f = 0.0;
  for (double t : times) {
    const auto e = tip_error(chain, c, t, demo.hand_at(t)).e;
    f += w.w_p * e.head<3>().squaredNorm() + w.w_R * e.segment<3>(3).squaredNorm() + w.w_v * e.tail<3>().squaredNorm();
    const ChannelVec jerk = eval_spline(c, t, 3);
    f += w.w_j * jerk.head<kArmJoints>().squaredNorm();
  }
  return f;
}

inline std::vector<TrackingSample> tracking_report(const Demonstration& demo, const ChainSpec& chain,
                                                   const CommandSpline& c, const std::vector<double>& times) {
  std::vector<TrackingSample> out;
  for (double t : times) {
    const auto e = tip_error(chain, c, t, demo.hand_at(t)).e;
    out.push_back({t, e.head<3>().norm(), e.segment<3>(3).norm(), e.tail<3>().norm()});
  }
  return out;
}

inline double tracking_rms_position(const std::vector<TrackingSample>& r) {
  double s = 0.0;
  for (const auto& x : r) s += x.position_error * x.position_error;
  return r.empty() ? 0.0 : std::sqrt(s / static_cast<double>(r.size()));
}

inline void write_tracking_csv(const std::vector<TrackingSample>& r, std::ostream& out) {
  out << "t,position_error_m,rotation_error_rad,velocity_error_mps\n";
  for (const auto& x : r)
    out << format_double(x.time) << ',' << format_double(x.position_error) << ',' << format_double(x.rotation_error)
        << ',' << format_double(x.velocity_error) << "\n";
}

/// Gauss-Newton tracking with a backtracking line search. Position, rate and acceleration bounds are
/// linear in the knots and hold exactly on every iterate; the start-height bound is linearised and
/// re-checked by the line search. Base channels stay constant in time.
inline TrackingResult track_demonstration(const Demonstration& demo, const ChainSpec& chain, const JointLimits& limits,
                                          const TrackingWeights& w, const TrackingOptions& opt = {},
                                          const CommandSpline* start = nullptr) {
  w.validate();
  limits.validate();
  demo.validate();
  require(demo.T > 0.0, "tracking: demonstration duration must be positive");
  const auto times = tracking_times(demo.T, opt.samples);
  CommandSpline u = start ? *start : initial_command(demo, chain, limits, w);
  u.duration = demo.T;
  init_detail::pin_boundary_rates(u);

  TrackingResult res;
  double f = tracking_objective(demo, chain, u, w, times);
  res.history.push_back(f);
  const int n = kKnotParams;
  std::vector<Eigen::Matrix<double, kKnots, 1>> w3;
  for (double t : times) w3.push_back(spline_basis_weights(t, demo.T, 3));

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    QpProblem p;
    p.P = MatX::Zero(n, n);
    p.q = VecX::Zero(n);
    for (std::size_t i = 0; i < times.size(); ++i) {
      const auto te = tip_error(chain, u, times[i], demo.hand_at(times[i]));
      Eigen::Matrix<double, 9, 1> W;
      W << VecX::Constant(3, w.w_p), VecX::Constant(3, w.w_R), VecX::Constant(3, w.w_v);
      p.P += 2.0 * te.J.transpose() * W.asDiagonal() * te.J;
      p.q += 2.0 * te.J.transpose() * W.cwiseProduct(te.e);
      const Eigen::Matrix<double, kKnots, kKnots> JJ = w3[i] * w3[i].transpose();
      for (int ch = 0; ch < kArmJoints; ++ch) {
        p.P.block<kKnots, kKnots>(ch * kKnots, ch * kKnots) += 2.0 * w.w_j * JJ;
        p.q.segment<kKnots>(ch * kKnots) += 2.0 * w.w_j * w3[i] * u.knots.row(ch).dot(w3[i]);
      }
    }
    p.P.diagonal().array() += 2.0 * opt.damping * (1.0 + p.P.diagonal().maxCoeff());

    RowBuilder eq(n);
    for (int ch = kArmJoints; ch < kChannels; ++ch)
      for (int j = 1; j < kKnots; ++j) {
        const int r = eq.add_row(0.0);
        eq.add(r, ch * kKnots + j, 1.0);
        eq.add(r, ch * kKnots, -1.0);
      }
    for (int ch = 0; ch < kArmJoints; ++ch) {
      // rest at both ends: knot 1 = knot 0 and knot 6 = knot 7
      int r = eq.add_row(0.0);
      eq.add(r, ch * kKnots + 1, 1.0);
      eq.add(r, ch * kKnots, -1.0);
      r = eq.add_row(0.0);
      eq.add(r, ch * kKnots + kKnots - 2, 1.0);
      eq.add(r, ch * kKnots + kKnots - 1, -1.0);
    }
    p.A = eq.matrix();
    p.b = eq.rhs();

    RowBuilder in(n);
    auto margin = [&](double bound) { return opt.bound_margin * (1.0 + std::abs(bound)); };
    const std::array<const JointVec*, 3> lo = {&limits.q_min, &limits.qd_min, &limits.qdd_min};
    const std::array<const JointVec*, 3> hi = {&limits.q_max, &limits.qd_max, &limits.qdd_max};
    for (double t : times)
      for (int order = 0; order <= 2; ++order) {
        const auto wts = spline_basis_weights(t, demo.T, order);
        const ChannelVec val = u.knots * wts;
        for (int j = 0; j < kArmJoints; ++j) {
          const double up = (*hi[order])[j] - val[j], down = val[j] - (*lo[order])[j];
          int r = in.add_row(std::max(up - margin((*hi[order])[j]), 0.5 * up));
          for (int k = 0; k < kKnots; ++k) in.add(r, j * kKnots + k, wts[k]);
          r = in.add_row(std::max(down - margin((*lo[order])[j]), 0.5 * down));
          for (int k = 0; k < kKnots; ++k) in.add(r, j * kKnots + k, -wts[k]);
        }
      }
    {
      const ConfigVec q0 = eval_spline(u, 0.0, 0);
      const double z = tip_position(chain, q0).z();
      const auto Jz = (tip_jacobian(chain, q0).row(2) * spline_knot_jacobian_dense(u, 0.0, 0)).eval();
      const double room = z - w.z_min;
      const int r = in.add_row(std::max(room - margin(w.z_min), 0.5 * room));
      for (int k = 0; k < n; ++k) in.add(r, k, -Jz[k]);
    }
    p.C = in.matrix();
    p.h = in.rhs();

    const auto sol = solve_qp(p, opt.solver);
    if (sol.status == QpStatus::Infeasible || !sol.x.allFinite()) break;
    const KnotMatrix du = CommandSpline::from_flat(sol.x, 1.0).knots;

    double alpha = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 30; ++ls, alpha *= 0.5) {
      CommandSpline trial = u;
      trial.knots += alpha * du;
      init_detail::pin_boundary_rates(trial);
      if (tip_position(chain, eval_spline(trial, 0.0, 0)).z() < w.z_min) continue;
      const double ft = tracking_objective(demo, chain, trial, w, times);
      if (ft < f) {
        const double rel = (f - ft) / std::max(f, 1e-300);
        u = trial;
        f = ft;
        res.history.push_back(f);
        accepted = true;
        res.iterations = iter + 1;
        if (rel < opt.relative_tolerance) iter = opt.max_iterations;
        break;
      }
    }
    if (!accepted) break;
  }
  res.command = u;
  res.objective = f;
  if (f > opt.error_ceiling)
    throw NoProgress("tracking objective " + format_double(f) + " stalls above the ceiling " +
                         format_double(opt.error_ceiling),
                     res);
  return res;
}

}  // namespace taskilc
