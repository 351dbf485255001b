#pragma once

// Command -> fingertip path -> rope rollout, and the end-to-end derivative of the rope state at
// chosen times with respect to the flattened command knots.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "taskilc/arm_model.hpp"
#include "taskilc/curvekit.hpp"
#include "taskilc/rope_sim.hpp"

namespace taskilc {

using TipKnotJacobian = Eigen::Matrix<double, 3, kKnotParams>;

/// Fingertip positions at the command rate, optionally with d tip / d knots.
struct TipSamples {
  std::vector<double> times;
  std::vector<Vec3> positions;
  std::vector<TipKnotJacobian> jacobians;  // empty unless requested
};

inline TipSamples command_tip_samples(const ChainSpec& chain, const CommandSpline& c, bool with_jacobian,
                                      double rate = kCommandRate) {
  TipSamples s;
  s.times = time_grid(c.duration, 1.0 / rate);
  for (double t : s.times) {
    const ConfigVec q = eval_spline(c, t, 0);
    s.positions.push_back(tip_position(chain, q));
    if (with_jacobian) {
      const auto B = spline_knot_jacobian_dense(c, t, 0);
      s.jacobians.push_back(tip_jacobian(chain, q).topRows<3>() * B);
    }
  }
  return s;
}

/// Linear interpolation weights from an increasing sample grid onto uniform times 0, dt, 2dt, ...
/// Times past the last sample clamp to it.
struct GridResampling {
  std::vector<int> lower;
  std::vector<double> weight;  // value = (1 - w) * s[lower] + w * s[lower + 1]

  template <class T>
  T apply(const std::vector<T>& samples, int k) const {
    const int i = lower[k];
    const double w = weight[k];
    if (w == 0.0) return samples[i];
    return (1.0 - w) * samples[i] + w * samples[i + 1];
  }
};

inline GridResampling resample_weights(const std::vector<double>& times, double dt, int steps) {
  require(!times.empty(), "resample: empty sample grid");
  GridResampling r;
  int i = 0;
  const int last = static_cast<int>(times.size()) - 1;
  for (int k = 0; k <= steps; ++k) {
    const double t = k * dt;
    while (i < last && times[i + 1] <= t + 1e-12) ++i;
    r.lower.push_back(i);
    if (i >= last || t <= times[i] + 1e-12) {
      r.weight.push_back(0.0);
    } else {
      r.weight.push_back(std::clamp((t - times[i]) / (times[i + 1] - times[i]), 0.0, 1.0));
    }
  }
  return r;
}

/// Rope-grid steps needed to cover time t.
inline int steps_to_cover(double t, double dt) { return std::max(0, static_cast<int>(std::ceil(t / dt - 1e-9))); }

inline std::vector<Vec3> rope_grid_tips(const std::vector<double>& times, const std::vector<Vec3>& tips, double dt,
                                        double t_end) {
  const int steps = steps_to_cover(t_end, dt);
  const auto r = resample_weights(times, dt, steps);
  std::vector<Vec3> out;
  for (int k = 0; k <= steps; ++k) out.push_back(r.apply(tips, k));
  return out;
}

/// Bracketing rope-grid states for time t: x(t) = (1 - alpha) x[k] + alpha x[k + 1].
struct TimeBracket {
  int k = 0;
  double alpha = 0.0;
};

inline TimeBracket bracket(double t, double dt) {
  TimeBracket b;
  const double s = t / dt;
  b.k = static_cast<int>(std::floor(s + 1e-9));
  b.alpha = std::max(0.0, s - b.k);
  if (b.alpha < 1e-9) b.alpha = 0.0;
  return b;
}

/// Stacked [p; v] at time t by linear interpolation between rope-grid states.
inline VecX state_at(const Rollout& r, double t) {
  const auto b = bracket(t, r.dt);
  require(b.k < r.size(), "state_at: time beyond rollout");
  if (b.alpha == 0.0) return r.states[b.k].x();
  require(b.k + 1 < r.size(), "state_at: time beyond rollout");
  return (1.0 - b.alpha) * r.states[b.k].x() + b.alpha * r.states[b.k + 1].x();
}

/// Model rollout for a command from the static hanging state under the initial fingertip.
inline Rollout model_rollout(const ChainSpec& chain, const CommandSpline& c, const RopeModel& model, double t_end) {
  const auto s = command_tip_samples(chain, c, false);
  const auto tips = rope_grid_tips(s.times, s.positions, model.params().dt, std::min(t_end, c.duration));
  return rollout(model, model.static_hanging_state(tips.front()), tips);
}

/// d[p(t); v(t)] / d knots for the critical time (and optional extra times).
struct LinearizedSystem {
  MatX M;                          // 6N x 80 at t_c
  VecX x_tc;                       // predicted [p; v] at t_c
  double t_c = 0.0;
  CommandSpline command;
  Rollout rollout;
  std::vector<double> extra_times;
  std::vector<MatX> M_extra;
  std::vector<VecX> x_extra;
};

inline LinearizedSystem linearize_system(const ChainSpec& chain, const CommandSpline& c, const RopeModel& model,
                                         double t_c, const std::vector<double>& extra_times = {}) {
  require(t_c >= 0.0 && t_c <= c.duration, "linearize_system: t_c outside command");
  const double dt = model.params().dt;
  double t_end = t_c;
  for (double t : extra_times) t_end = std::max(t_end, t);
  const auto samples = command_tip_samples(chain, c, true);
  const int steps = steps_to_cover(t_end, dt);
  const auto weights = resample_weights(samples.times, dt, steps);
  std::vector<Vec3> tips;
  for (int k = 0; k <= steps; ++k) tips.push_back(weights.apply(samples.positions, k));

  LinearizedSystem lin;
  lin.t_c = t_c;
  lin.command = c;
  lin.extra_times = extra_times;
  lin.rollout = rollout(model, model.static_hanging_state(tips.front()), tips);

  std::vector<double> all_times = {t_c};
  all_times.insert(all_times.end(), extra_times.begin(), extra_times.end());
  std::vector<int> snaps;
  for (double t : all_times) {
    const auto b = bracket(t, dt);
    snaps.push_back(b.k);
    snaps.push_back(std::min(b.k + 1, steps));
  }
  auto tip_derivative = [&](int k) -> MatX { return weights.apply(samples.jacobians, k); };
  const auto S = accumulate_sensitivities(model, lin.rollout, tip_derivative, kKnotParams, snaps);

  for (std::size_t i = 0; i < all_times.size(); ++i) {
    const auto b = bracket(all_times[i], dt);
    const MatX Mi = b.alpha == 0.0 ? S[2 * i] : MatX((1.0 - b.alpha) * S[2 * i] + b.alpha * S[2 * i + 1]);
    const VecX xi = state_at(lin.rollout, all_times[i]);
    if (i == 0) {
      lin.M = Mi;
      lin.x_tc = xi;
    } else {
      lin.M_extra.push_back(Mi);
      lin.x_extra.push_back(xi);
    }
  }
  return lin;
}

}  // namespace taskilc
