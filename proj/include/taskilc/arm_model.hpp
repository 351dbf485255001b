#pragma once

// Kinematic 7-joint arm on a 3-DOF translating base.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskilc/common.hpp"
#include "taskilc/curvekit.hpp"

namespace taskilc {

using JointVec = Eigen::Matrix<double, kArmJoints, 1>;
using ConfigVec = ChannelVec;  // 7 joints followed by base x, y, z
using TipJacobian = Eigen::Matrix<double, 6, kChannels>;

struct JointSpec {
  Vec3 axis = Vec3::UnitZ();    // rotation axis in the joint's own frame
  Vec3 offset = Vec3::Zero();   // translation from the parent frame to this joint
  double mass = 0.0;            // point mass of the link driven by this joint (kg)
  Vec3 com = Vec3::Zero();      // point-mass location in this joint's frame
};

struct ChainSpec {
  std::array<JointSpec, kArmJoints> joints;
  Vec3 tip_offset = Vec3::Zero();

  void validate() const {
    for (const auto& j : joints) {
      if (std::abs(j.axis.norm() - 1.0) > 1e-10) throw ConfigError("chain: joint axis must be unit norm");
      if (!(j.mass >= 0.0)) throw ConfigError("chain: link mass must be nonnegative");
    }
  }

  double total_mass() const {
    double m = 0.0;
    for (const auto& j : joints) m += j.mass;
    return m;
  }

  /// Stand-in 7-DOF arm: alternating z/y axes, pointing up at q = 0, about 0.75 m reach from the
  /// shoulder and 13 kg of link mass placed at link midpoints.
  static ChainSpec default_arm() {
    ChainSpec c;
    const std::array<Vec3, kArmJoints> axes = {Vec3::UnitZ(), Vec3::UnitY(), Vec3::UnitZ(), Vec3::UnitY(),
                                               Vec3::UnitZ(), Vec3::UnitY(), Vec3::UnitZ()};
    const std::array<double, kArmJoints> offsets = {0.25, 0.05, 0.25, 0.05, 0.20, 0.05, 0.05};
    const std::array<double, kArmJoints> masses = {3.0, 2.5, 2.5, 1.8, 1.5, 1.0, 0.7};
    const double tip = 0.10;
    for (int i = 0; i < kArmJoints; ++i) {
      c.joints[i].axis = axes[i];
      c.joints[i].offset = Vec3(0.0, 0.0, offsets[i]);
      c.joints[i].mass = masses[i];
      const double next = (i + 1 < kArmJoints) ? offsets[i + 1] : tip;
      c.joints[i].com = Vec3(0.0, 0.0, 0.5 * next);
    }
    c.tip_offset = Vec3(0.0, 0.0, tip);
    return c;
  }
};

struct JointLimits {
  JointVec q_min, q_max, qd_min, qd_max, qdd_min, qdd_max, tau_min, tau_max;

  /// Manufacturer limits used throughout (position rad, rate rad/s, accel rad/s^2, torque N m).
  static JointLimits defaults() {
    JointLimits l;
    l.q_min << -6.28, -1.8, -6.28, -0.19, -6.28, -1.69, -6.28;
    l.q_max << 6.28, 1.9, 6.28, 3.92, 6.28, 3.14, 6.28;
    l.qd_max.setConstant(3.14);
    l.qd_min = -l.qd_max;
    l.qdd_max.setConstant(100.0);
    l.qdd_min = -l.qdd_max;
    l.tau_max << 130, 130, 40, 40, 40, 20, 20;
    l.tau_min = -l.tau_max;
    return l;
  }

  void validate() const {
    auto ordered = [](const JointVec& lo, const JointVec& hi) { return ((hi - lo).array() > 0.0).all(); };
    if (!ordered(q_min, q_max) || !ordered(qd_min, qd_max) || !ordered(qdd_min, qdd_max) ||
        !ordered(tau_min, tau_max))
      throw ConfigError("joint limits: every min must be strictly below its max");
  }
};

struct TipPose {
  Vec3 position = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();
  Vec3 velocity = Vec3::Zero();
};

namespace detail {

inline Mat3 axis_rotation(const Vec3& axis, double angle) { return Eigen::AngleAxisd(angle, axis).toRotationMatrix(); }

/// Per-joint world frames for configuration q.
struct ChainFrames {
  std::array<Vec3, kArmJoints> origin;
  std::array<Mat3, kArmJoints> rotation;  // frame after applying the joint rotation
  std::array<Vec3, kArmJoints> axis;      // world joint axis
  Vec3 tip;
  Mat3 tip_rotation;
};

inline ChainFrames chain_frames(const ChainSpec& chain, const ConfigVec& q) {
  ChainFrames f;
  Vec3 o = q.tail<kBaseDofs>();
  Mat3 R = Mat3::Identity();
  for (int j = 0; j < kArmJoints; ++j) {
    const auto& js = chain.joints[j];
    o = o + R * js.offset;
    f.axis[j] = R * js.axis;
    R = R * axis_rotation(js.axis, q[j]);
    f.origin[j] = o;
    f.rotation[j] = R;
  }
  f.tip = o + R * chain.tip_offset;
  f.tip_rotation = R;
  return f;
}

}  // namespace detail

/// Geometric Jacobian of the tip: rows 0-2 linear velocity, rows 3-5 angular velocity.
inline TipJacobian tip_jacobian(const ChainSpec& chain, const ConfigVec& q) {
  const auto f = detail::chain_frames(chain, q);
  TipJacobian J = TipJacobian::Zero();
  for (int j = 0; j < kArmJoints; ++j) {
    J.block<3, 1>(0, j) = f.axis[j].cross(f.tip - f.origin[j]);
    J.block<3, 1>(3, j) = f.axis[j];
  }
  J.block<3, 3>(0, kArmJoints) = Mat3::Identity();
  return J;
}

inline TipPose forward_kinematics(const ChainSpec& chain, const ConfigVec& q, const ConfigVec& qd) {
  const auto f = detail::chain_frames(chain, q);
  TipPose pose;
  pose.position = f.tip;
  pose.rotation = f.tip_rotation;
  pose.velocity = tip_jacobian(chain, q).topRows<3>() * qd;
  return pose;
}

inline Vec3 tip_position(const ChainSpec& chain, const ConfigVec& q) { return detail::chain_frames(chain, q).tip; }

/// Recursive Newton-Euler over point-mass links with the base held fixed; gravity along -z.
inline JointVec inverse_dynamics(const ChainSpec& chain, const JointVec& q, const JointVec& qd, const JointVec& qdd,
                                 double gravity = kGravity) {
  ConfigVec full = ConfigVec::Zero();
  full.head<kArmJoints>() = q;
  const auto f = detail::chain_frames(chain, full);

  // forward pass: angular velocity/acceleration and point-mass accelerations
  std::array<Vec3, kArmJoints> com_pos, force;
  Vec3 w = Vec3::Zero(), dw = Vec3::Zero(), a_origin = Vec3::Zero();
  Vec3 prev_origin = full.tail<kBaseDofs>();
  const Vec3 g(0.0, 0.0, -gravity);
  for (int j = 0; j < kArmJoints; ++j) {
    const Vec3 r = f.origin[j] - prev_origin;
    a_origin = a_origin + dw.cross(r) + w.cross(w.cross(r));
    const Vec3 z = f.axis[j];
    dw = dw + z * qdd[j] + w.cross(z * qd[j]);
    w = w + z * qd[j];
    const Vec3 c = f.rotation[j] * chain.joints[j].com;
    const Vec3 a_com = a_origin + dw.cross(c) + w.cross(w.cross(c));
    com_pos[j] = f.origin[j] + c;
    force[j] = chain.joints[j].mass * (a_com - g);
    prev_origin = f.origin[j];
  }
  // backward pass: moment of downstream inertial+gravity loads about each joint axis
  JointVec tau;
  for (int j = 0; j < kArmJoints; ++j) {
    Vec3 n = Vec3::Zero();
    for (int i = j; i < kArmJoints; ++i) n += (com_pos[i] - f.origin[j]).cross(force[i]);
    tau[j] = f.axis[j].dot(n);
  }
  return tau;
}

// --- limit checking ------------------------------------------------------------------------

enum class LimitKind { Position, Velocity, Acceleration, Torque };

inline const char* to_string(LimitKind k) {
  switch (k) {
    case LimitKind::Position: return "position";
    case LimitKind::Velocity: return "velocity";
    case LimitKind::Acceleration: return "acceleration";
    case LimitKind::Torque: return "torque";
  }
  return "?";
}

struct LimitViolation {
  double time = 0.0;
  int channel = 0;
  LimitKind kind = LimitKind::Position;
  double margin = 0.0;  // amount by which the bound is exceeded (> 0)
};

/// Joint trajectory sampled on a time grid; each matrix is 7 x samples.
struct JointTrajectory {
  std::vector<double> times;
  MatX q, qd, qdd, tau;

  int samples() const { return static_cast<int>(times.size()); }
};

/// Every violated bound. `relative_tolerance` widens each bound by that fraction of its magnitude.
inline std::vector<LimitViolation> check_limits(const JointTrajectory& traj, const JointLimits& limits,
                                                double relative_tolerance = 0.0) {
  const int n = traj.samples();
  std::vector<LimitViolation> out;
  auto scan = [&](const MatX& data, const JointVec& lo, const JointVec& hi, LimitKind kind) {
    if (data.size() == 0) return;
    if (data.rows() != kArmJoints || data.cols() != n) throw ConfigError("check_limits: inconsistent sample counts");
    for (int s = 0; s < n; ++s)
      for (int j = 0; j < kArmJoints; ++j) {
        const double v = data(j, s);
        const double upper = hi[j] + relative_tolerance * std::abs(hi[j]);
        const double lower = lo[j] - relative_tolerance * std::abs(lo[j]);
        if (v > upper) out.push_back({traj.times[s], j, kind, v - hi[j]});
        else if (v < lower) out.push_back({traj.times[s], j, kind, lo[j] - v});
      }
  };
  scan(traj.q, limits.q_min, limits.q_max, LimitKind::Position);
  scan(traj.qd, limits.qd_min, limits.qd_max, LimitKind::Velocity);
  scan(traj.qdd, limits.qdd_min, limits.qdd_max, LimitKind::Acceleration);
  scan(traj.tau, limits.tau_min, limits.tau_max, LimitKind::Torque);
  return out;
}

/// Uniform grid 0, dt, 2dt, ... that always ends exactly at `duration`.
inline std::vector<double> time_grid(double duration, double dt) {
  std::vector<double> t;
  const int n = static_cast<int>(std::ceil(duration / dt - 1e-9));
  for (int i = 0; i < n; ++i) t.push_back(i * dt);
  t.push_back(duration);
  return t;
}

inline constexpr double kCommandRate = 250.0;

/// Command sampled with exact spline derivatives and predicted torques.
inline JointTrajectory sample_command(const ChainSpec& chain, const CommandSpline& c, double rate = kCommandRate) {
  JointTrajectory tr;
  tr.times = time_grid(c.duration, 1.0 / rate);
  const int n = tr.samples();
  tr.q.resize(kArmJoints, n);
  tr.qd.resize(kArmJoints, n);
  tr.qdd.resize(kArmJoints, n);
  tr.tau.resize(kArmJoints, n);
  for (int s = 0; s < n; ++s) {
    const double t = tr.times[s];
    const JointVec q = eval_spline(c, t, 0).head<kArmJoints>();
    const JointVec qd = eval_spline(c, t, 1).head<kArmJoints>();
    const JointVec qdd = eval_spline(c, t, 2).head<kArmJoints>();
    tr.q.col(s) = q;
    tr.qd.col(s) = qd;
    tr.qdd.col(s) = qdd;
    tr.tau.col(s) = inverse_dynamics(chain, q, qd, qdd);
  }
  return tr;
}

// --- serialization ---------------------------------------------------------------------------

inline nlohmann::json chain_to_json(const ChainSpec& c) {
  auto vec = [](const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); };
  nlohmann::json j;
  auto joints = nlohmann::json::array();
  for (const auto& js : c.joints)
    joints.push_back({{"axis", vec(js.axis)}, {"offset", vec(js.offset)}, {"mass", js.mass}, {"com", vec(js.com)}});
  j["joints"] = joints;
  j["tip_offset"] = vec(c.tip_offset);
  return j;
}

inline ChainSpec chain_from_json(const nlohmann::json& j) {
  auto vec = [](const nlohmann::json& a) {
    if (!a.is_array() || a.size() != 3) throw ConfigError("chain: expected a 3-vector");
    return Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
  };
  ChainSpec c;
  const auto& joints = j.at("joints");
  if (!joints.is_array() || joints.size() != kArmJoints) throw ConfigError("chain: exactly 7 joints required");
  for (int i = 0; i < kArmJoints; ++i) {
    const auto& js = joints[i];
    c.joints[i].axis = vec(js.at("axis"));
    c.joints[i].offset = vec(js.at("offset"));
    c.joints[i].mass = js.at("mass").get<double>();
    c.joints[i].com = vec(js.at("com"));
  }
  c.tip_offset = vec(j.at("tip_offset"));
  c.validate();
  return c;
}

inline ChainSpec load_chain(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read chain file " + path);
  return chain_from_json(nlohmann::json::parse(in));
}

}  // namespace taskilc
