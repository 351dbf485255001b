#pragma once

// Virtual hardware: joint servos with lag, a "true" rope, and a 200 Hz marker measurement.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "taskilc/arm_model.hpp"
#include "taskilc/demo_io.hpp"
#include "taskilc/demonstration.hpp"
#include "taskilc/rng.hpp"
#include "taskilc/system_model.hpp"

namespace taskilc {

struct RopePreset {
  int id;
  const char* name;
  const char* material;
  double diameter_mm;
  double density;        // kg/m
  double end_weight_g;
  double stiffness_factor;  // relative to the cotton baseline
  double damping_factor;
};

inline constexpr double kRopeLength = 1.1;  // m

inline const std::array<RopePreset, 7>& rope_presets() {
  static const std::array<RopePreset, 7> table = {{
      {1, "#10 Sash Spot Cord", "cotton", 9, 0.040, 18, 1.0, 1.0},
      {2, "#14 Spot Cord", "cotton", 12, 0.081, 80, 1.0, 1.0},
      {3, "Soft Braided", "cotton", 15, 0.076, 80, 0.5, 1.0},
      {4, "Shoe Lace", "cotton", 7, 0.014, 5, 1.0, 1.0},
      {5, "Thick Twisted", "cotton", 25, 0.139, 50, 4.0, 1.0},
      {6, "3/8\" Chain", "steel", 20, 0.514, 50, 0.05, 0.5},
      {7, "3/8\" Surgical Tubing", "latex", 9, 0.026, 18, 0.2, 0.2},
  }};
  return table;
}

struct PlantConfig {
  RopeParams rope;               // true rope in its own model units
  int marker_stride = 1;         // every marker_stride-th rope point carries a marker
  double servo_tau = 0.02;       // s; 0 makes the servo exact
  double rate_clamp_factor = 1.5;  // servo rate saturates at this multiple of the velocity limit
  JointLimits limits = JointLimits::defaults();
  double fault_tolerance = 0.02;   // relative overshoot before the controller faults
  double sample_rate = kCaptureRate;
  double noise_std = 0.001;      // m
  double dropout = 0.0;          // per marker and sample
  int preset = 0;                // 0: custom
  double link_mass_kg = 0.0;     // physical mass of one model mass unit
  double end_weight_kg = 0.0;

  int markers() const { return rope.N / marker_stride; }

  /// Rope mass without the end weight, in kg.
  double rope_mass_kg() const {
    double units = 0.0;
    for (int i = 0; i < rope.N; ++i) units += rope.mass(i);
    return link_mass_kg * units - end_weight_kg;
  }

  void validate() const {
    rope.validate();
    if (marker_stride < 1 || rope.N % marker_stride != 0) throw ConfigError("plant: marker stride must divide N");
    if (!(servo_tau >= 0.0)) throw ConfigError("plant: servo time constant must be >= 0");
    if (!(rate_clamp_factor >= 1.0)) throw ConfigError("plant: rate clamp must not undercut the velocity limit");
    if (!(fault_tolerance >= 0.0)) throw ConfigError("plant: fault tolerance must be >= 0");
    if (!(sample_rate > 0.0)) throw ConfigError("plant: sample rate must be positive");
    if (!(noise_std >= 0.0)) throw ConfigError("plant: noise must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("plant: dropout must be in [0, 1)");
    limits.validate();
  }

  /// The model itself as a plant: exact servo, no noise.
  static PlantConfig ideal(const RopeParams& model) {
    PlantConfig p;
    p.rope = model;
    p.servo_tau = 0.0;
    p.noise_std = 0.0;
    return p;
  }
};

/// Plant for one of the seven rope presets. The stiffness and damping are twice the learner's
/// defaults times a per-material factor; `fine` triples the link count.
inline PlantConfig load_preset(int id, bool fine = false, const RopeParams& model = {}) {
  if (id < 1 || id > 7) throw ConfigError("unknown rope preset " + std::to_string(id) + " (expected 1..7)");
  const RopePreset& r = rope_presets()[id - 1];
  PlantConfig p;
  p.preset = id;
  const int split = fine ? 3 : 1;
  p.rope = model;
  p.rope.N = model.N * split;
  p.rope.l = kRopeLength / p.rope.N;
  p.marker_stride = split;
  p.link_mass_kg = r.density * kRopeLength / p.rope.N;
  p.end_weight_kg = r.end_weight_g * 1e-3;
  p.rope.m = 1.0;
  p.rope.m_e = 1.0 + p.end_weight_kg / p.link_mass_kg;
  const double scale = static_cast<double>(split * split);
  p.rope.k = 2.0 * model.k * r.stiffness_factor * scale;
  p.rope.b = 2.0 * model.b * r.damping_factor * scale;
  return p;
}

struct MeasuredRollout {
  std::uint64_t seed = 0;
  double duration = 0.0;  // commanded motion
  // 200 Hz measurement
  std::vector<double> marker_times;
  std::vector<VecX> markers;          // NaN on dropout
  std::vector<VecX> marker_velocity;  // central differences of the measured positions
  // 250 Hz execution
  JointTrajectory joints;
  std::vector<ConfigVec> config;
  std::vector<Vec3> tip_positions;
  Rollout rope;  // true rope on its own grid
  bool faulted = false;
  double fault_time = std::numeric_limits<double>::infinity();
  std::string fault_reason;

  int marker_count() const { return markers.empty() ? 0 : static_cast<int>(markers.front().size() / 3); }
};

struct TrialOptions {
  double hold_after = 0.0;  // keep measuring with the final configuration held
};

namespace plant_detail {

inline void servo(const std::vector<double>& t, const std::vector<ConfigVec>& desired, const PlantConfig& cfg,
                  std::vector<ConfigVec>& actual, MatX& qd) {
  const int n = static_cast<int>(t.size());
  actual = desired;
  qd = MatX::Zero(kArmJoints, n);
  for (int s = 1; s < n; ++s) {
    const double h = t[s] - t[s - 1];
    for (int j = 0; j < kArmJoints; ++j) {
      const double prev = actual[s - 1][j];
      double next = (prev + (h / cfg.servo_tau) * desired[s][j]) / (1.0 + h / cfg.servo_tau);
      const double clamp = cfg.rate_clamp_factor * std::max(std::abs(cfg.limits.qd_max[j]), std::abs(cfg.limits.qd_min[j]));
      next = std::clamp(next, prev - clamp * h, prev + clamp * h);
      actual[s][j] = next;
      qd(j, s) = (next - prev) / h;
    }
  }
}

// Continuous rope path between integrator steps: natural cubic spline through the stored positions.
class PositionSpline {
 public:
  explicit PositionSpline(const Rollout& r) : r_(r) {
    const int n = r.size(), d = n ? static_cast<int>(r.states.front().p.size()) : 0;
    curv_ = MatX::Zero(d, n);
    if (n < 3) return;
    const double h = r.dt;
    std::vector<double> c(n, 0.0);
    MatX rhs = MatX::Zero(d, n);
    for (int i = 1; i < n - 1; ++i) {
      const VecX dd = (r.states[i + 1].p - 2.0 * r.states[i].p + r.states[i - 1].p) * (6.0 / (h * h));
      const double den = 4.0 - (i > 1 ? c[i - 1] : 0.0);
      c[i] = 1.0 / den;
      rhs.col(i) = (dd - (i > 1 ? VecX(rhs.col(i - 1)) : VecX::Zero(d))) / den;
    }
    for (int i = n - 2; i >= 1; --i) curv_.col(i) = rhs.col(i) - c[i] * curv_.col(i + 1);
  }

  VecX operator()(double t) const {
    const auto b = bracket(t, r_.dt);
    if (b.alpha == 0.0 || b.k + 1 >= r_.size()) return r_.states[std::min(b.k, r_.size() - 1)].p;
    const double s = b.alpha, h2 = r_.dt * r_.dt / 6.0;
    const VecX &a = r_.states[b.k].p, &c = r_.states[b.k + 1].p;
    return (1.0 - s) * a + s * c + h2 * ((std::pow(1.0 - s, 3) - (1.0 - s)) * curv_.col(b.k) + (std::pow(s, 3) - s) * curv_.col(b.k + 1));
  }

 private:
  const Rollout& r_;
  MatX curv_;  // second derivatives at the steps
};

}  // namespace plant_detail

/// Runs a command on the plant. Faults are reported in the result; data after a fault is absent.
inline MeasuredRollout execute_trial(const ChainSpec& chain, const CommandSpline& c, const PlantConfig& cfg,
                                     std::uint64_t seed, const TrialOptions& opt = {}) {
  cfg.validate();
  c.validate();
  MeasuredRollout m;
  m.seed = seed;
  m.duration = c.duration;

  // joint execution at the command rate
  const auto t = time_grid(c.duration, 1.0 / kCommandRate);
  const int n = static_cast<int>(t.size());
  std::vector<ConfigVec> desired(n);
  for (int s = 0; s < n; ++s) desired[s] = eval_spline(c, t[s], 0);
  JointTrajectory& jt = m.joints;
  jt.times = t;
  jt.q.resize(kArmJoints, n);
  jt.qdd.resize(kArmJoints, n);
  jt.tau.resize(kArmJoints, n);
  if (cfg.servo_tau == 0.0) {
    m.config = desired;
    jt.qd.resize(kArmJoints, n);
    for (int s = 0; s < n; ++s) {
      jt.qd.col(s) = eval_spline(c, t[s], 1).head<kArmJoints>();
      jt.qdd.col(s) = eval_spline(c, t[s], 2).head<kArmJoints>();
    }
  } else {
    plant_detail::servo(t, desired, cfg, m.config, jt.qd);
    std::vector<JointVec> v(n);
    for (int s = 0; s < n; ++s) v[s] = jt.qd.col(s);
    const auto a = differentiate(t, v);
    for (int s = 0; s < n; ++s) jt.qdd.col(s) = a[s];
  }
  for (int s = 0; s < n; ++s) {
    jt.q.col(s) = m.config[s].head<kArmJoints>();
    jt.tau.col(s) = inverse_dynamics(chain, jt.q.col(s), jt.qd.col(s), jt.qdd.col(s));
  }

  // controller fault: everything from the first violation on is lost
  const auto violations = check_limits(jt, cfg.limits, cfg.fault_tolerance);
  int keep = n;
  if (!violations.empty()) {
    const auto& v = violations.front();
    double first = v.time;
    const LimitViolation* worst = &v;
    for (const auto& x : violations)
      if (x.time < first) first = x.time, worst = &x;
    m.faulted = true;
    m.fault_time = first;
    m.fault_reason = std::string(to_string(worst->kind)) + " limit on joint " + std::to_string(worst->channel + 1);
    keep = 0;
    while (keep < n && t[keep] < first - 1e-12) ++keep;
  }
  auto truncate = [&](MatX& x) { x.conservativeResize(Eigen::NoChange, keep); };
  jt.times.resize(keep);
  truncate(jt.q);
  truncate(jt.qd);
  truncate(jt.qdd);
  truncate(jt.tau);
  m.config.resize(keep);
  for (const auto& q : m.config) m.tip_positions.push_back(tip_position(chain, q));
  if (keep == 0) return m;

  // true rope
  const RopeModel rope(cfg.rope);
  const double dt = cfg.rope.dt;
  const double t_end = (m.faulted ? jt.times.back() : c.duration) + opt.hold_after;
  std::vector<Vec3> tips = rope_grid_tips(jt.times, m.tip_positions, dt, jt.times.back());
  const int steps = steps_to_cover(t_end, dt);
  while (static_cast<int>(tips.size()) <= steps) tips.push_back(m.tip_positions.back());
  m.rope.dt = dt;
  m.rope.states.push_back(rope.static_hanging_state(tips.front()));
  m.rope.tips.push_back(tips.front());
  for (int k = 0; k < steps; ++k) {
    try {
      auto s = rope.step(m.rope.states.back(), tips[k], tips[k + 1], k);
      m.rope.states.push_back(std::move(s.state));
      m.rope.tips.push_back(tips[k + 1]);
      m.rope.substeps.push_back(s.substeps);
    } catch (const NewtonDivergence& e) {
      m.faulted = true;
      m.fault_time = std::min(m.fault_time, k * dt);
      m.fault_reason = "rope simulation diverged";
      break;
    }
  }
  const double rope_end = (m.rope.size() - 1) * dt;

  // measurement
  auto noise = make_stream(seed, "marker-noise");
  auto drop = make_stream(seed, "marker-dropout");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const int markers = cfg.markers();
  const double period = 1.0 / cfg.sample_rate;
  const plant_detail::PositionSpline path(m.rope);
  for (int i = 0;; ++i) {
    const double ts = i * period;
    if (ts > std::min(t_end, rope_end) + 1e-9) break;
    const VecX x = path(std::min(ts, rope_end));
    VecX p(3 * markers);
    for (int k = 0; k < markers; ++k) {
      const int point = (k + 1) * cfg.marker_stride - 1;
      p.segment<3>(3 * k) = x.segment<3>(3 * point);
      for (int a = 0; a < 3; ++a)
        if (cfg.noise_std > 0.0) p[3 * k + a] += cfg.noise_std * gauss(noise);
      if (cfg.dropout > 0.0 && uni(drop) < cfg.dropout)
        p.segment<3>(3 * k).setConstant(std::numeric_limits<double>::quiet_NaN());
    }
    m.marker_times.push_back(ts);
    m.markers.push_back(p);
  }
  m.marker_velocity = differentiate(m.marker_times, m.markers);
  return m;
}

/// Hand pose (fingertip frame) of an executed trial at time t.
inline HandPose executed_hand(const ChainSpec& chain, const MeasuredRollout& m, double t) {
  const ConfigVec q = lagrange_at(m.joints.times, m.config, std::clamp(t, 0.0, m.joints.times.back()));
  std::vector<ConfigVec> qd(m.config.size());
  for (std::size_t s = 0; s < m.config.size(); ++s) {
    qd[s].setZero();
    qd[s].head<kArmJoints>() = m.joints.qd.col(static_cast<int>(s));
  }
  const auto pose = forward_kinematics(chain, q, lagrange_at(m.joints.times, qd, std::clamp(t, 0.0, m.joints.times.back())));
  return {pose.position, pose.rotation, pose.velocity};
}

/// Measured trial in the capture CSV layout; `pre_roll` seconds of the initial rest pose are prepended.
inline RawCapture trial_to_capture(const ChainSpec& chain, const MeasuredRollout& m, double pre_roll = 0.0,
                                   std::uint64_t noise_seed = 0, double noise_std = 0.0) {
  require(!m.marker_times.empty(), "capture: trial produced no measurements");
  RawCapture raw;
  raw.seed = m.seed;
  raw.marker_count = m.marker_count();
  const double period = m.marker_times.size() > 1 ? m.marker_times[1] - m.marker_times[0] : 1.0 / kCaptureRate;
  const int pre = static_cast<int>(std::llround(pre_roll / period));
  auto noise = make_stream(noise_seed, "pre-roll-noise");
  std::normal_distribution<double> gauss(0.0, noise_std > 0.0 ? noise_std : 1.0);
  const HandPose h0 = executed_hand(chain, m, 0.0);
  // the rope hangs still before the motion starts
  const VecX rest = state_at(m.rope, 0.0);
  const int stride = m.rope.states.front().p.size() / 3 / raw.marker_count;
  for (int i = 0; i < pre; ++i) {
    raw.times.push_back(i * period);
    raw.hand_position.push_back(h0.position);
    raw.hand_rotation.push_back(h0.rotation);
    VecX p(3 * raw.marker_count);
    for (int k = 0; k < raw.marker_count; ++k) {
      p.segment<3>(3 * k) = rest.segment<3>(3 * ((k + 1) * stride - 1));
      if (noise_std > 0.0)
        for (int a = 0; a < 3; ++a) p[3 * k + a] += noise_std * gauss(noise);
    }
    raw.markers.push_back(p);
  }
  for (std::size_t i = 0; i < m.marker_times.size(); ++i) {
    const HandPose h = executed_hand(chain, m, m.marker_times[i]);
    raw.times.push_back(pre * period + m.marker_times[i]);
    raw.hand_position.push_back(h.position);
    raw.hand_rotation.push_back(h.rotation);
    raw.markers.push_back(m.markers[i]);
  }
  raw.window_begin = raw.times.front();
  raw.window_end = raw.times.back();
  return raw;
}

/// Synthetic demonstration capture: the plant executes `c`, the rope keeps moving for `hold_after`
/// seconds with the arm at rest, and `pre_roll` seconds of rest precede the motion. t_c is placed at
/// `t_c_fraction` of the motion.
inline RawCapture synthesize_demo(const ChainSpec& chain, const CommandSpline& c, const PlantConfig& plant,
                                  double t_c_fraction, std::uint64_t seed, double pre_roll = 0.3,
                                  double hold_after = 0.3) {
  require(t_c_fraction > 0.0 && t_c_fraction < 1.0, "synthesize_demo: t_c fraction must be in (0, 1)");
  TrialOptions opt;
  opt.hold_after = hold_after;
  const auto m = execute_trial(chain, c, plant, seed, opt);
  if (m.faulted) throw ConfigError("synthesize_demo: plant faulted (" + m.fault_reason + ")");
  RawCapture raw = trial_to_capture(chain, m, pre_roll, seed, plant.noise_std);
  raw.t_c = raw.times.front() + pre_roll + t_c_fraction * c.duration;
  return raw;
}

class TruncatedBeforeCritical : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Demonstration straight from a trial: hand from the executed joints, rope from the markers.
inline Demonstration demonstration_from_trial(const ChainSpec& chain, const MeasuredRollout& m, double t_c) {
  if (m.faulted && m.fault_time <= m.duration) throw ConfigError("demonstration: trial faulted");
  Demonstration d;
  d.t_c = t_c;
  d.T = m.duration;
  for (std::size_t s = 0; s < m.joints.times.size(); ++s) {
    const double t = m.joints.times[s];
    const HandPose h = executed_hand(chain, m, t);
    d.hand_times.push_back(t);
    d.hand_position.push_back(h.position);
    d.hand_rotation.push_back(h.rotation);
    d.hand_velocity.push_back(h.velocity);
  }
  for (std::size_t i = 0; i < m.marker_times.size(); ++i) {
    d.marker_times.push_back(m.marker_times[i]);
    d.marker_position.push_back(m.markers[i]);
    d.marker_velocity.push_back(m.marker_velocity[i]);
    if (m.marker_times[i] > t_c && i >= 2 && m.marker_times[i - 2] > t_c) break;
  }
  for (const auto& p : d.marker_position)
    if (!p.allFinite()) throw GapTooLarge("demonstration: marker dropout in a synthetic trial");
  d.validate();
  return d;
}

/// Measured minus demonstrated [positions; velocities] at the demonstration's critical time.
inline VecX critical_point_error(const MeasuredRollout& m, const Demonstration& demo) {
  const double tc = demo.t_c;
  if (m.faulted && m.fault_time <= tc + 1e-9)
    throw TruncatedBeforeCritical("trial faulted at t = " + format_double(m.fault_time) + " s before t_c (" +
                                  m.fault_reason + ")");
  if (m.marker_times.size() < 2 || m.marker_times.back() < tc - 1e-9)
    throw TruncatedBeforeCritical("measurement ends before t_c");
  if (m.marker_count() != demo.markers()) throw ConfigError("critical error: marker count differs from demonstration");
  // four-sample neighbourhood used by the interpolation must be complete
  const int n = static_cast<int>(m.marker_times.size());
  int i = static_cast<int>(std::upper_bound(m.marker_times.begin(), m.marker_times.end(), tc) - m.marker_times.begin()) - 1;
  i = std::clamp(i, 0, n - 2);
  for (int k = std::max(0, i - 1); k <= std::min(n - 1, i + 2); ++k)
    if (!m.markers[k].allFinite() || !m.marker_velocity[k].allFinite())
      throw TruncatedBeforeCritical("marker dropout at the critical time");
  const VecX p = lagrange_at(m.marker_times, m.markers, tc);
  const VecX v = lagrange_at(m.marker_times, m.marker_velocity, tc);
  const VecX d = demo.marker_state_at(tc);
  const int k = static_cast<int>(p.size());
  VecX e(2 * k);
  e.head(k) = p - d.head(k);
  e.tail(k) = v - d.tail(k);
  return e;
}

}  // namespace taskilc
