#include <gtest/gtest.h>

#include <random>

#include "taskilc/ilc.hpp"
#include "taskilc/scenario.hpp"

using namespace taskilc;

namespace {

RopeParams small_rope() {
  RopeParams p;
  p.N = 5;
  return p;
}

const ChainSpec& arm() {
  static const ChainSpec c = ChainSpec::default_arm();
  return c;
}

JointLimits loose_limits() {
  JointLimits l = JointLimits::defaults();
  for (JointVec* v : {&l.q_max, &l.qd_max, &l.qdd_max, &l.tau_max}) v->setConstant(1e6);
  for (JointVec* v : {&l.q_min, &l.qd_min, &l.qdd_min, &l.tau_min}) v->setConstant(-1e6);
  return l;
}

Demonstration demo_for(const CommandSpline& c, const RopeParams& rope, double t_c) {
  const auto m = execute_trial(arm(), c, PlantConfig::ideal(rope), 1);
  return demonstration_from_trial(arm(), m, t_c);
}

VecX random_error(int N, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  VecX e(6 * N);
  for (int i = 0; i < e.size(); ++i) e[i] = g(rng);
  return e;
}

// Orthonormal basis of {du : A du = 0} restricted to the knot block.
MatX null_space(const MatX& A) {
  Eigen::FullPivLU<MatX> lu(A);
  MatX Z = lu.kernel();
  return Eigen::HouseholderQR<MatX>(Z).householderQ() * MatX::Identity(Z.rows(), Z.cols());
}

}  // namespace

TEST(LinearizeSystem, EndToEndMatchesFiniteDifferences) {
  const RopeParams params = small_rope();
  const RopeModel model(params);
  const double t_c = 0.2, h = 1e-6;
  for (int inst = 0; inst < 5; ++inst) {
    const CommandSpline c = perturb_command(reference_throw(0.5), 0.1, 100 + inst);
    const auto lin = linearize_system(arm(), c, model, t_c);
    MatX fd(lin.M.rows(), lin.M.cols());
    const KnotVec base = c.flat();
    for (int j = 0; j < kKnotParams; ++j) {
      KnotVec up = base, dn = base;
      up[j] += h;
      dn[j] -= h;
      const VecX xu = linearize_system(arm(), CommandSpline::from_flat(up, c.duration), model, t_c).x_tc;
      const VecX xd = linearize_system(arm(), CommandSpline::from_flat(dn, c.duration), model, t_c).x_tc;
      fd.col(j) = (xu - xd) / (2 * h);
    }
    EXPECT_LE((lin.M - fd).norm() / fd.norm(), 1e-4) << "instance " << inst;
  }
}

TEST(BuildQp, SizesAndCostDiagonal) {
  const RopeParams rope = small_rope();
  const CommandSpline c = reference_throw();
  const Demonstration demo = demo_for(c, rope, 0.4);
  QpWeights w;
  InverseModelOptions opt;
  opt.limit_samples = 10;
  opt.torque_samples = 4;
  const auto lin = linearize_system(arm(), c, RopeModel(rope), demo.t_c);
  const auto ft = build_follow_through_cost(arm(), c, demo, demo.t_c, w);
  const VecX err = random_error(rope.N, 1, 0.01);
  const auto qp = build_qp(err, lin.M, ft, arm(), c, JointLimits::defaults(), w, opt);
  const int nx = 6 * rope.N;
  EXPECT_EQ(qp.problem.P.rows(), kKnotParams + nx);
  EXPECT_EQ(qp.state_vars, nx);
  EXPECT_EQ(qp.problem.A.rows(), nx + kBaseDofs * kKnots + 2 * kArmJoints);
  EXPECT_EQ(qp.limit_rows, 10 * 3 * kArmJoints * 2);
  EXPECT_EQ(qp.torque_rows, 4 * kArmJoints * 2);
  for (int i = 0; i < 3 * rope.N; ++i) EXPECT_DOUBLE_EQ(qp.problem.P(kKnotParams + i, kKnotParams + i), 2.0 * w.w_critical_pos);
  for (int i = 3 * rope.N; i < nx; ++i) EXPECT_DOUBLE_EQ(qp.problem.P(kKnotParams + i, kKnotParams + i), 2.0 * w.w_critical_vel);
  // follow-through covers t_c and the command samples after it
  EXPECT_EQ(ft.size(), follow_through_times(demo.t_c, c.duration).size());
  EXPECT_TRUE(ft.front().critical);
  EXPECT_DOUBLE_EQ(ft.front().time, demo.t_c);
}

TEST(BuildQp, ObjectiveAtZeroIsErrorPlusFollowThrough) {
  const RopeParams rope = small_rope();
  const CommandSpline c = reference_throw();
  const Demonstration demo = demo_for(perturb_command(c, 0.05, 3), rope, 0.4);
  QpWeights w;
  const auto lin = linearize_system(arm(), c, RopeModel(rope), demo.t_c);
  const auto ft = build_follow_through_cost(arm(), c, demo, demo.t_c, w);
  const VecX err = random_error(rope.N, 2, 0.02);
  const auto qp = build_qp(err, lin.M, ft, arm(), c, JointLimits::defaults(), w);
  double expect = weighted_cost(err, w);
  for (const auto& t : ft) expect += t.constant;
  EXPECT_NEAR(qp.objective_at_zero, expect, 1e-12 * (1.0 + expect));
  EXPECT_GT(expect, weighted_cost(err, w));
}

TEST(InverseQp, ZeroErrorZeroFollowThroughGivesZeroUpdate) {
  const RopeParams rope = small_rope();
  const CommandSpline c = reference_throw();
  const auto lin = linearize_system(arm(), c, RopeModel(rope), 0.4);
  const auto qp = build_qp(VecX::Zero(6 * rope.N), lin.M, {}, arm(), c, JointLimits::defaults(), QpWeights{});
  const auto up = solve_inverse_qp(qp);
  ASSERT_EQ(up.status, QpStatus::Optimal);
  EXPECT_LE(up.delta_u.norm(), 1e-9);
  EXPECT_LE(up.kkt_residual, 1e-7);
}

TEST(InverseQp, UnconstrainedUpdateMatchesLeastSquaresOracle) {
  // Without bounds or follow-through the update minimises |M du - x|_Q^2 + w_c |du_arm|^2 on the
  // subspace that keeps the base fixed and the end rates unchanged.
  const RopeParams rope = small_rope();
  const CommandSpline c = reference_throw();
  const auto lin = linearize_system(arm(), c, RopeModel(rope), 0.4);
  QpWeights w;
  InverseModelOptions opt;
  opt.torque_samples = 0;
  opt.limit_samples = 2;
  const VecX err = random_error(rope.N, 5, 0.01);
  const auto qp = build_qp(err, lin.M, {}, arm(), c, loose_limits(), w, opt);
  const auto up = solve_inverse_qp(qp);
  ASSERT_EQ(up.status, QpStatus::Optimal);

  MatX A = MatX::Zero(kBaseDofs * kKnots + 2 * kArmJoints, kKnotParams);
  int r = 0;
  for (int ch = kArmJoints; ch < kChannels; ++ch)
    for (int j = 0; j < kKnots; ++j) A(r++, ch * kKnots + j) = 1.0;
  for (int ch = 0; ch < kArmJoints; ++ch)
    for (int j : {0, kKnots - 2}) {
      A(r, ch * kKnots + j) = 1.0;
      A(r++, ch * kKnots + j + 1) = -1.0;
    }
  const MatX Z = null_space(A);
  const VecX Q = w.critical_weights(rope.N);
  MatX R = MatX::Zero(kKnotParams, kKnotParams);
  for (int i = 0; i < kArmJoints * kKnots; ++i) R(i, i) = w.w_control;
  const MatX MZ = lin.M * Z;
  const MatX H = MZ.transpose() * Q.asDiagonal() * MZ + Z.transpose() * R * Z;
  const VecX y = H.ldlt().solve(MZ.transpose() * Q.cwiseProduct(err));
  const VecX oracle = Z * y;
  const VecX got = up.delta_u.transpose().reshaped();  // channel-major
  EXPECT_LE((got - oracle).norm(), 1e-6 * (1.0 + oracle.norm()));
  EXPECT_LE((up.delta_x - lin.M * got).norm(), 1e-8);
}

TEST(InverseQp, BaseRowsAndEndRatesStayFixed) {
  const RopeParams rope = small_rope();
  const CommandSpline c = reference_throw();
  const auto lin = linearize_system(arm(), c, RopeModel(rope), 0.4);
  const auto qp = build_qp(random_error(rope.N, 9, 0.05), lin.M, {}, arm(), c, JointLimits::defaults(), QpWeights{});
  const auto up = solve_inverse_qp(qp);
  ASSERT_EQ(up.status, QpStatus::Optimal);
  EXPECT_GT(up.delta_u.topRows<kArmJoints>().norm(), 1e-4);
  EXPECT_EQ(up.delta_u.bottomRows<kBaseDofs>().cwiseAbs().maxCoeff(), 0.0);
  for (int ch = 0; ch < kArmJoints; ++ch) {
    EXPECT_NEAR(up.delta_u(ch, 0), up.delta_u(ch, 1), 1e-9);
    EXPECT_NEAR(up.delta_u(ch, 6), up.delta_u(ch, 7), 1e-9);
  }
}

TEST(FollowThrough, GradientMatchesExactCost) {
  // d/d(du) of |e(u - du)|_W^2 at du = 0 equals -b.
  const RopeParams rope = small_rope();
  const CommandSpline c = reference_throw();
  const Demonstration demo = demo_for(perturb_command(c, 0.05, 11), rope, 0.4);
  QpWeights w;
  const auto ft = build_follow_through_cost(arm(), c, demo, demo.t_c, w);
  auto exact = [&](const KnotVec& du, const FollowThroughTerm& term) {
    const CommandSpline v = CommandSpline::from_flat(c.flat() - du, c.duration);
    const double wp = term.critical ? w.w_pc : w.w_pft, wR = term.critical ? w.w_Rc : w.w_Rft,
                 wv = term.critical ? w.w_vc : w.w_vft;
    Eigen::Matrix<double, 9, 1> W;
    W << wp, wp, wp, wR, wR, wR, wv, wv, wv;
    const auto e = tip_error(arm(), v, term.time, demo.hand_at(std::min(term.time, demo.T))).e;
    return e.dot(W.cwiseProduct(e));
  };
  for (std::size_t i : {std::size_t{0}, ft.size() / 2, ft.size() - 1}) {
    const auto& term = ft[i];
    EXPECT_NEAR(exact(KnotVec::Zero(), term), term.constant, 1e-12);
    const double h = 1e-6;
    for (int j : {3, 17, 30, 52}) {
      KnotVec e = KnotVec::Zero();
      e[j] = h;
      const double g = (exact(e, term) - exact(-e, term)) / (2 * h);
      EXPECT_NEAR(g, -term.b[j], 1e-5 * (1.0 + std::abs(g))) << "term " << i << " knot " << j;
    }
  }
}

TEST(FollowThrough, QuadraticModelIsSecondOrderAtZeroError) {
  const RopeParams rope = small_rope();
  const CommandSpline c = reference_throw();
  const Demonstration demo = demo_for(c, rope, 0.4);
  QpWeights w;
  const auto ft = build_follow_through_cost(arm(), c, demo, demo.t_c, w);
  const auto& term = ft.back();
  EXPECT_LE(term.constant, 1e-10);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  KnotVec dir;
  for (int j = 0; j < kKnotParams; ++j) dir[j] = j < kArmJoints * kKnots ? g(rng) : 0.0;
  dir.normalize();
  auto gap = [&](double s) {
    const KnotVec du = s * dir;
    const CommandSpline v = CommandSpline::from_flat(c.flat() - du, c.duration);
    Eigen::Matrix<double, 9, 1> W;
    W << w.w_pft, w.w_pft, w.w_pft, w.w_Rft, w.w_Rft, w.w_Rft, w.w_vft, w.w_vft, w.w_vft;
    const auto e = tip_error(arm(), v, term.time, demo.hand_at(std::min(term.time, demo.T))).e;
    const double model = term.constant - term.b.dot(du) + du.dot(term.Q * du);
    return std::abs(e.dot(W.cwiseProduct(e)) - model);
  };
  // a cubic remainder shrinks 1000x per decade
  EXPECT_LT(gap(1e-3), 2e-2 * gap(1e-2));
}

TEST(InverseModel, UpdatedCommandRespectsTightLimits) {
  const RopeParams rope = small_rope();
  const CommandSpline c = reference_throw();
  const Demonstration demo = demo_for(perturb_command(c, 0.1, 21), rope, 0.4);
  JointLimits lim = JointLimits::defaults();
  const JointTrajectory tr = sample_command(arm(), c);
  for (int j = 0; j < kArmJoints; ++j) {
    lim.qd_max[j] = 1.02 * tr.qd.row(j).cwiseAbs().maxCoeff() + 1e-3;
    lim.qd_min[j] = -lim.qd_max[j];
  }
  InverseModelContext ctx;
  ctx.chain = arm();
  ctx.command = c;
  ctx.rope = rope;
  ctx.demo = &demo;
  ctx.limits = lim;
  const VecX err = random_error(rope.N, 3, 0.2);
  const auto r = inverse_model(err, ctx);
  ASSERT_EQ(r.update.status, QpStatus::Optimal);
  EXPECT_LE(r.update.kkt_residual, 1e-7);
  CommandSpline next = c;
  next.knots -= r.update.delta_u;
  EXPECT_TRUE(command_within_limits(arm(), next, lim));
  EXPECT_GT(r.update.delta_u.norm(), 1e-3);
}

TEST(InverseModel, CommandOutsideLimitsIsInfeasible) {
  const RopeParams rope = small_rope();
  const CommandSpline c = reference_throw();
  const Demonstration demo = demo_for(c, rope, 0.4);
  JointLimits lim = JointLimits::defaults();
  lim.q_max[3] = 1.0;  // the reference bends joint 4 to 1.4 rad
  InverseModelContext ctx;
  ctx.chain = arm();
  ctx.command = c;
  ctx.rope = rope;
  ctx.demo = &demo;
  ctx.limits = lim;
  const auto r = inverse_model(random_error(rope.N, 1, 0.01), ctx);
  EXPECT_EQ(r.update.status, QpStatus::Infeasible);
  EXPECT_EQ(r.update.delta_u.norm(), 0.0);
}

TEST(EqualWeighted, TimesAndWeightShare) {
  const auto times = equal_weight_times(0.1, 0.005, 4);
  ASSERT_EQ(times.size(), 4u);
  EXPECT_DOUBLE_EQ(times.front(), 0.02);
  EXPECT_DOUBLE_EQ(times.back(), 0.08);
  EXPECT_TRUE(equal_weight_times(0.02, 0.005, 4).empty());

  const RopeParams rope = small_rope();
  const CommandSpline c = reference_throw();
  const auto lin = linearize_system(arm(), c, RopeModel(rope), 0.3, {0.1, 0.2});
  ASSERT_EQ(lin.M_extra.size(), 2u);
  std::vector<ExtraTarget> extra = {{lin.M_extra[0], VecX::Zero(6 * rope.N)}, {lin.M_extra[1], VecX::Zero(6 * rope.N)}};
  QpWeights w;
  InverseModelOptions opt;
  const auto shared = build_qp(VecX::Zero(6 * rope.N), lin.M, {}, arm(), c, JointLimits::defaults(), w, opt, extra);
  EXPECT_DOUBLE_EQ(shared.problem.P(kKnotParams, kKnotParams), 2.0 * w.w_critical_pos / 3.0);
  opt.equal_average = false;
  const auto summed = build_qp(VecX::Zero(6 * rope.N), lin.M, {}, arm(), c, JointLimits::defaults(), w, opt, extra);
  EXPECT_DOUBLE_EQ(summed.problem.P(kKnotParams, kKnotParams), 2.0 * w.w_critical_pos);
}

TEST(InverseModel, ErrorSizeMismatchIsRejected) {
  const RopeParams rope = small_rope();
  const CommandSpline c = reference_throw();
  const auto lin = linearize_system(arm(), c, RopeModel(rope), 0.3);
  EXPECT_THROW(build_qp(VecX::Zero(6 * rope.N + 6), lin.M, {}, arm(), c, JointLimits::defaults(), QpWeights{}),
               ConfigError);
}
