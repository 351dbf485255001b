#include <gtest/gtest.h>

#include <random>

#include "taskilc/arm_model.hpp"

using namespace taskilc;

namespace {

ConfigVec random_config(std::mt19937& rng) {
  std::uniform_real_distribution<double> u(-1.2, 1.2);
  ConfigVec q;
  for (int i = 0; i < kChannels; ++i) q[i] = u(rng);
  return q;
}

/// Two revolute joints about y in the x-z plane with links of length a1, a2.
ChainSpec planar_two_link(double a1, double a2) {
  ChainSpec c;
  for (auto& j : c.joints) {
    j.axis = Vec3::UnitZ();
    j.offset.setZero();
  }
  c.joints[0].axis = Vec3::UnitY();
  c.joints[1].axis = Vec3::UnitY();
  c.joints[1].offset = Vec3(a1, 0.0, 0.0);
  c.tip_offset = Vec3(a2, 0.0, 0.0);
  return c;
}

}  // namespace

TEST(ForwardKinematics, HomePose) {
  const auto chain = ChainSpec::default_arm();
  const auto pose = forward_kinematics(chain, ConfigVec::Zero(), ConfigVec::Zero());
  Vec3 sum = chain.tip_offset;
  for (const auto& j : chain.joints) sum += j.offset;
  EXPECT_LT((pose.position - sum).norm(), 1e-15);
  EXPECT_TRUE(pose.rotation.isApprox(Mat3::Identity()));
  EXPECT_NEAR(chain.total_mass(), 13.0, 1e-12);
}

TEST(ForwardKinematics, BaseTranslationEquivariance) {
  std::mt19937 rng(1);
  const auto chain = ChainSpec::default_arm();
  ConfigVec q = random_config(rng);
  const auto a = forward_kinematics(chain, q, ConfigVec::Zero());
  q[7] += 0.1;
  const auto b = forward_kinematics(chain, q, ConfigVec::Zero());
  EXPECT_LT((b.position - a.position - Vec3(0.1, 0, 0)).norm(), 1e-15);
  EXPECT_EQ(b.rotation, a.rotation);
}

TEST(ForwardKinematics, VelocityMatchesFiniteDifference) {
  std::mt19937 rng(2);
  const auto chain = ChainSpec::default_arm();
  for (int i = 0; i < 20; ++i) {
    const ConfigVec q = random_config(rng), qd = random_config(rng);
    const double h = 1e-6;
    const Vec3 fd = (tip_position(chain, q + h * qd) - tip_position(chain, q - h * qd)) / (2 * h);
    const Vec3 v = forward_kinematics(chain, q, qd).velocity;
    EXPECT_LE((fd - v).norm(), 1e-5 * std::max(1.0, v.norm()));
  }
}

TEST(TipJacobian, BaseColumns) {
  std::mt19937 rng(3);
  const auto J = tip_jacobian(ChainSpec::default_arm(), random_config(rng));
  EXPECT_EQ(Mat3(J.block<3, 3>(0, 7)), Mat3::Identity());
  EXPECT_EQ(Mat3(J.block<3, 3>(3, 7)), Mat3::Zero());
}

TEST(TipJacobian, MatchesFiniteDifferences) {
  std::mt19937 rng(4);
  const auto chain = ChainSpec::default_arm();
  for (int trial = 0; trial < 20; ++trial) {
    const ConfigVec q = random_config(rng);
    const auto J = tip_jacobian(chain, q);
    const Mat3 R0 = forward_kinematics(chain, q, ConfigVec::Zero()).rotation;
    const double h = 1e-6;
    for (int i = 0; i < kChannels; ++i) {
      ConfigVec up = q, dn = q;
      up[i] += h;
      dn[i] -= h;
      const auto pu = forward_kinematics(chain, up, ConfigVec::Zero());
      const auto pd = forward_kinematics(chain, dn, ConfigVec::Zero());
      const Vec3 lin = (pu.position - pd.position) / (2 * h);
      // world-frame angular velocity: vee(dR R^T)
      const Vec3 ang = vee((pu.rotation - pd.rotation) / (2 * h) * R0.transpose());
      EXPECT_LT((lin - J.block<3, 1>(0, i)).norm(), 1e-5);
      EXPECT_LT((ang - J.block<3, 1>(3, i)).norm(), 1e-5);
    }
  }
}

TEST(TipJacobian, PlanarTwoLinkClosedForm) {
  const double a1 = 0.4, a2 = 0.3;
  const auto chain = planar_two_link(a1, a2);
  ConfigVec q = ConfigVec::Zero();
  q[0] = 0.3;
  q[1] = -0.7;
  const auto J = tip_jacobian(chain, q);
  // rotation about +y by angle t maps x to (cos t, 0, -sin t)
  const double t1 = q[0], t12 = q[0] + q[1];
  Eigen::Matrix<double, 2, 2> expected;  // rows: x, z
  expected << -a1 * std::sin(t1) - a2 * std::sin(t12), -a2 * std::sin(t12),
      -a1 * std::cos(t1) - a2 * std::cos(t12), -a2 * std::cos(t12);
  EXPECT_NEAR(J(0, 0), expected(0, 0), 1e-14);
  EXPECT_NEAR(J(0, 1), expected(0, 1), 1e-14);
  EXPECT_NEAR(J(2, 0), expected(1, 0), 1e-14);
  EXPECT_NEAR(J(2, 1), expected(1, 1), 1e-14);
  EXPECT_NEAR(J(1, 0), 0.0, 1e-14);
  EXPECT_NEAR(J(4, 0), 1.0, 1e-14);
  EXPECT_NEAR(J(4, 1), 1.0, 1e-14);
}

TEST(InverseDynamics, StaticHorizontalLink) {
  // one 1 kg point mass 0.5 m out along x on a joint rotating about y
  ChainSpec chain = planar_two_link(0.5, 0.0);
  for (auto& j : chain.joints) j.mass = 0.0;
  chain.joints[0].mass = 1.0;
  chain.joints[0].com = Vec3(0.5, 0.0, 0.0);
  const JointVec tau = inverse_dynamics(chain, JointVec::Zero(), JointVec::Zero(), JointVec::Zero());
  EXPECT_NEAR(std::abs(tau[0]), 4.905, 1e-12);
  const JointVec none = inverse_dynamics(chain, JointVec::Zero(), JointVec::Zero(), JointVec::Zero(), 0.0);
  EXPECT_LT(none.norm(), 1e-15);
}

TEST(InverseDynamics, ZeroGravityRest) {
  std::mt19937 rng(5);
  const JointVec q = random_config(rng).head<7>();
  EXPECT_LT(inverse_dynamics(ChainSpec::default_arm(), q, JointVec::Zero(), JointVec::Zero(), 0.0).norm(), 1e-12);
}

TEST(InverseDynamics, LinearInAcceleration) {
  std::mt19937 rng(6);
  const auto chain = ChainSpec::default_arm();
  const JointVec q = random_config(rng).head<7>(), qd = random_config(rng).head<7>();
  const JointVec a = random_config(rng).head<7>(), b = random_config(rng).head<7>();
  const JointVec t0 = inverse_dynamics(chain, q, qd, JointVec::Zero());
  const JointVec ta = inverse_dynamics(chain, q, qd, a) - t0;
  const JointVec tb = inverse_dynamics(chain, q, qd, b) - t0;
  const JointVec tab = inverse_dynamics(chain, q, qd, 2.0 * a - 3.0 * b) - t0;
  EXPECT_LT((tab - (2.0 * ta - 3.0 * tb)).norm(), 1e-10);
}

TEST(InverseDynamics, EnergyBalance) {
  // tau . qd = dKE/dt + dPE/dt along q(t) = q0 + A sin(w t)
  const auto chain = ChainSpec::default_arm();
  std::mt19937 rng(7);
  const JointVec q0 = random_config(rng).head<7>(), A = random_config(rng).head<7>();
  const double w = 2.3;
  auto state = [&](double t, JointVec& q, JointVec& qd, JointVec& qdd) {
    q = q0 + A * std::sin(w * t);
    qd = A * w * std::cos(w * t);
    qdd = -A * w * w * std::sin(w * t);
  };
  auto energy = [&](double t) {
    JointVec q, qd, qdd;
    state(t, q, qd, qdd);
    ConfigVec fq = ConfigVec::Zero();
    fq.head<7>() = q;
    const auto f = detail::chain_frames(chain, fq);
    double e = 0.0;
    const double h = 1e-6;
    for (int j = 0; j < kArmJoints; ++j) {
      auto com = [&](const JointVec& qq) {
        ConfigVec c = ConfigVec::Zero();
        c.head<7>() = qq;
        const auto ff = detail::chain_frames(chain, c);
        return Vec3(ff.origin[j] + ff.rotation[j] * chain.joints[j].com);
      };
      const Vec3 v = (com(q + h * qd) - com(q - h * qd)) / (2 * h);
      const Vec3 p = f.origin[j] + f.rotation[j] * chain.joints[j].com;
      e += chain.joints[j].mass * (0.5 * v.squaredNorm() + kGravity * p.z());
    }
    return e;
  };
  for (double t : {0.1, 0.4, 0.77}) {
    JointVec q, qd, qdd;
    state(t, q, qd, qdd);
    const double power = inverse_dynamics(chain, q, qd, qdd).dot(qd);
    const double h = 1e-4;
    const double dE = (energy(t + h) - energy(t - h)) / (2 * h);
    EXPECT_NEAR(power, dE, 1e-6 * std::max(1.0, std::abs(power)) + 1e-5);
  }
}

TEST(Limits, DefaultsMatchTable) {
  const auto l = JointLimits::defaults();
  EXPECT_EQ(l.qd_max[0], 3.14);
  EXPECT_EQ(l.qdd_max[3], 100.0);
  EXPECT_EQ(l.tau_max[0], 130.0);
  EXPECT_EQ(l.tau_max[6], 20.0);
  EXPECT_EQ(l.q_min[3], -0.19);
  EXPECT_EQ(l.q_max[5], 3.14);
  EXPECT_NO_THROW(l.validate());
}

TEST(Limits, Violations) {
  const auto l = JointLimits::defaults();
  JointTrajectory tr;
  tr.times = {0.0, 0.004, 0.008};
  tr.q = MatX::Zero(7, 3);
  tr.qd = MatX::Zero(7, 3);
  tr.qdd = MatX::Zero(7, 3);
  tr.tau = MatX::Zero(7, 3);
  EXPECT_TRUE(check_limits(tr, l).empty());
  tr.qd(0, 1) = 3.2;
  auto v = check_limits(tr, l);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, LimitKind::Velocity);
  EXPECT_EQ(v[0].channel, 0);
  EXPECT_NEAR(v[0].margin, 0.06, 1e-12);
  EXPECT_DOUBLE_EQ(v[0].time, 0.004);
  tr.qd(0, 1) = 0.0;
  tr.tau(0, 2) = 131.0;
  v = check_limits(tr, l);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, LimitKind::Torque);
  EXPECT_NEAR(v[0].margin, 1.0, 1e-12);
}

TEST(Limits, InconsistentSamples) {
  JointTrajectory tr;
  tr.times = {0.0, 0.1};
  tr.q = MatX::Zero(7, 3);
  EXPECT_THROW(check_limits(tr, JointLimits::defaults()), ConfigError);
}

TEST(ChainJson, RoundTrip) {
  const auto c = ChainSpec::default_arm();
  const auto back = chain_from_json(nlohmann::json::parse(chain_to_json(c).dump()));
  for (int i = 0; i < kArmJoints; ++i) {
    EXPECT_EQ(back.joints[i].axis, c.joints[i].axis);
    EXPECT_EQ(back.joints[i].offset, c.joints[i].offset);
    EXPECT_EQ(back.joints[i].mass, c.joints[i].mass);
    EXPECT_EQ(back.joints[i].com, c.joints[i].com);
  }
  EXPECT_EQ(back.tip_offset, c.tip_offset);
}

TEST(SampleCommand, GridAndTorque) {
  KnotMatrix k = KnotMatrix::Zero();
  k.row(1).setLinSpaced(0.0, 0.5);
  const CommandSpline c(k, 0.6);
  const auto tr = sample_command(ChainSpec::default_arm(), c);
  EXPECT_EQ(tr.samples(), 151);
  EXPECT_DOUBLE_EQ(tr.times.back(), 0.6);
  EXPECT_NEAR(tr.qd(1, 75), eval_spline(c, tr.times[75], 1)[1], 1e-14);
}
