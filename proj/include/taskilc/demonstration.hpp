#pragma once

// Demonstration data on a time axis that starts at the beginning of the hand motion (t = 0).

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <vector>

#include "taskilc/common.hpp"

namespace taskilc {

/// Four-point Lagrange interpolation on a uniform or non-uniform grid; falls back to fewer points
/// near the ends.
template <class T>
T lagrange_at(const std::vector<double>& times, const std::vector<T>& values, double t) {
  const int n = static_cast<int>(times.size());
  require(n > 0 && static_cast<int>(values.size()) == n, "interpolation: size mismatch");
  if (n == 1) return values[0];
  require(t >= times.front() - 1e-9 && t <= times.back() + 1e-9, "interpolation: time outside samples");
  int i = static_cast<int>(std::upper_bound(times.begin(), times.end(), t) - times.begin()) - 1;
  i = std::clamp(i, 0, n - 2);
  if (std::abs(t - times[i]) < 1e-12) return values[i];
  if (std::abs(t - times[i + 1]) < 1e-12) return values[i + 1];
  int lo = std::max(0, i - 1);
  int hi = std::min(n - 1, i + 2);
  T out = values[lo] * 0.0;
  for (int a = lo; a <= hi; ++a) {
    double w = 1.0;
    for (int b = lo; b <= hi; ++b)
      if (b != a) w *= (t - times[b]) / (times[a] - times[b]);
    out = out + values[a] * w;
  }
  return out;
}

struct HandPose {
  Vec3 position = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();
  Vec3 velocity = Vec3::Zero();
};

struct Demonstration {
  // hand trajectory on [0, T]
  std::vector<double> hand_times;
  std::vector<Vec3> hand_position;
  std::vector<Mat3> hand_rotation;
  std::vector<Vec3> hand_velocity;
  // rope markers on [0, t_c], stacked 3N positions and velocities
  std::vector<double> marker_times;
  std::vector<VecX> marker_position;
  std::vector<VecX> marker_velocity;

  double t0 = 0.0;  // start of the crop in capture time
  double t_c = 0.0;
  double T = 0.0;

  int markers() const { return marker_position.empty() ? 0 : static_cast<int>(marker_position.front().size() / 3); }

  void validate() const {
    if (!(0.0 < t_c && t_c < T)) throw ConfigError("demonstration: need 0 < t_c < T");
    if (hand_times.empty() || hand_position.size() != hand_times.size() || hand_rotation.size() != hand_times.size() ||
        hand_velocity.size() != hand_times.size())
      throw ConfigError("demonstration: inconsistent hand samples");
    if (marker_times.empty() || marker_position.size() != marker_times.size() ||
        marker_velocity.size() != marker_times.size())
      throw ConfigError("demonstration: inconsistent marker samples");
  }

  HandPose hand_at(double t) const {
    HandPose h;
    h.position = lagrange_at(hand_times, hand_position, t);
    h.velocity = lagrange_at(hand_times, hand_velocity, t);
    const int n = static_cast<int>(hand_times.size());
    int i = static_cast<int>(std::upper_bound(hand_times.begin(), hand_times.end(), t) - hand_times.begin()) - 1;
    i = std::clamp(i, 0, std::max(0, n - 2));
    if (n == 1) {
      h.rotation = hand_rotation[0];
    } else {
      const double a = std::clamp((t - hand_times[i]) / (hand_times[i + 1] - hand_times[i]), 0.0, 1.0);
      const Eigen::Quaterniond qa(hand_rotation[i]), qb(hand_rotation[i + 1]);
      h.rotation = qa.slerp(a, qb).toRotationMatrix();
    }
    return h;
  }

  /// Stacked [p; v] of the markers at time t (cubic interpolation).
  VecX marker_state_at(double t) const {
    const VecX p = lagrange_at(marker_times, marker_position, t);
    const VecX v = lagrange_at(marker_times, marker_velocity, t);
    VecX x(p.size() + v.size());
    x << p, v;
    return x;
  }
};

}  // namespace taskilc
