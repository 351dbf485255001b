#include <gtest/gtest.h>

#include <sstream>

#include "taskilc/ilc.hpp"
#include "taskilc/scenario.hpp"

using namespace taskilc;

namespace {

const ChainSpec& arm() {
  static const ChainSpec c = ChainSpec::default_arm();
  return c;
}

PlantConfig exact(const RopeParams& r = {}) {
  PlantConfig p = PlantConfig::ideal(r);
  return p;
}

const Demonstration& perfect_demo() {
  static const Demonstration d = target_demonstration(arm(), RopeParams{}, 7);
  return d;
}

// Speed of joint j along the command, sampled at the command rate.
double joint_speed(const CommandSpline& c, int j, double t) { return std::abs(eval_spline(c, t, 1)[j]); }

}  // namespace

TEST(Presets, TableRows) {
  const auto& t = rope_presets();
  EXPECT_STREQ(t[0].name, "#10 Sash Spot Cord");
  EXPECT_STREQ(t[0].material, "cotton");
  EXPECT_EQ(t[0].diameter_mm, 9);
  EXPECT_DOUBLE_EQ(t[0].density, 0.040);
  EXPECT_EQ(t[0].end_weight_g, 18);
  EXPECT_STREQ(t[6].name, "3/8\" Surgical Tubing");
  EXPECT_STREQ(t[6].material, "latex");
  EXPECT_DOUBLE_EQ(t[6].density, 0.026);
  EXPECT_DOUBLE_EQ(t[5].density, 0.514);
  for (int id = 1; id <= 7; ++id) EXPECT_EQ(t[id - 1].id, id);
}

TEST(Presets, MassMatchesDensityTimesLength) {
  for (int id = 1; id <= 7; ++id)
    for (bool fine : {false, true}) {
      const PlantConfig p = load_preset(id, fine);
      EXPECT_NEAR(p.rope_mass_kg(), rope_presets()[id - 1].density * kRopeLength, 1e-9) << id;
      EXPECT_NEAR(p.end_weight_kg, rope_presets()[id - 1].end_weight_g * 1e-3, 1e-15);
      EXPECT_NEAR(p.rope.N * p.rope.l, kRopeLength, 1e-12);
    }
}

TEST(Presets, FineModeTriplesLinksKeepsMarkers) {
  const PlantConfig c = load_preset(3), f = load_preset(3, true);
  EXPECT_EQ(f.rope.N, 33);
  EXPECT_EQ(f.marker_stride, 3);
  EXPECT_EQ(f.markers(), 11);
  EXPECT_EQ(c.markers(), 11);
  EXPECT_NEAR(f.rope.l, c.rope.l / 3.0, 1e-15);
  EXPECT_NEAR(f.link_mass_kg, c.link_mass_kg / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(f.rope.k, 9.0 * c.rope.k);
}

TEST(Presets, UnknownIdRejected) {
  EXPECT_THROW(load_preset(0), ConfigError);
  EXPECT_THROW(load_preset(8), ConfigError);
}

TEST(ExecuteTrial, IdealPlantMatchesModelRollout) {
  const CommandSpline c = reference_throw();
  const RopeParams rp;
  const auto m = execute_trial(arm(), c, exact(rp), 3);
  ASSERT_FALSE(m.faulted);
  const Rollout model = model_rollout(arm(), c, RopeModel(rp), c.duration);
  ASSERT_EQ(model.size(), m.rope.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < m.marker_times.size(); ++i) {
    const int k = static_cast<int>(std::llround(m.marker_times[i] / rp.dt));
    worst = std::max(worst, (m.markers[i] - model.states[k].p).cwiseAbs().maxCoeff());
  }
  EXPECT_LE(worst, 1e-6);
  const auto lin = linearize_system(arm(), c, RopeModel(rp), 0.4);
  EXPECT_LE((lin.x_tc.head(33) - m.markers[80]).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(ExecuteTrial, MeasurementShape) {
  const CommandSpline c = reference_throw();
  PlantConfig p = mismatched_plant(RopeParams{});
  p.dropout = 0.1;
  const auto m = execute_trial(arm(), c, p, 5);
  ASSERT_FALSE(m.faulted);
  EXPECT_EQ(m.marker_count(), 11);
  EXPECT_EQ(static_cast<int>(m.marker_times.size()), static_cast<int>(std::floor(c.duration * p.sample_rate + 1e-9)) + 1);
  int missing = 0, total = 0;
  for (const auto& x : m.markers)
    for (int k = 0; k < 11; ++k, ++total) missing += !std::isfinite(x[3 * k]);
  EXPECT_NEAR(static_cast<double>(missing) / total, 0.1, 0.03);
}

TEST(ExecuteTrial, DeterministicUnderSeed) {
  const CommandSpline c = reference_throw();
  const PlantConfig p = mismatched_plant(RopeParams{});
  const auto a = execute_trial(arm(), c, p, 11), b = execute_trial(arm(), c, p, 11), d = execute_trial(arm(), c, p, 12);
  ASSERT_EQ(a.markers.size(), b.markers.size());
  for (std::size_t i = 0; i < a.markers.size(); ++i) EXPECT_EQ(a.markers[i], b.markers[i]);
  EXPECT_NE(a.markers[10], d.markers[10]);
  // noise only: the true rope is seed independent
  EXPECT_EQ(a.rope.states.back().p, d.rope.states.back().p);
}

TEST(ExecuteTrial, ServoLagsDesiredTrajectory) {
  const CommandSpline c = reference_throw();
  PlantConfig p = exact();
  p.servo_tau = 0.02;
  const auto m = execute_trial(arm(), c, p, 1);
  ASSERT_FALSE(m.faulted);
  double plain = 0.0, shifted = 0.0;
  for (int s = 50; s < 100; ++s) {
    const double t = m.joints.times[s];
    const double q = m.joints.q(0, s);
    plain = std::max(plain, std::abs(q - eval_spline(c, t, 0)[0]));
    shifted = std::max(shifted, std::abs(q - eval_spline(c, t - p.servo_tau, 0)[0]));
  }
  EXPECT_GT(plain, 0.0);
  EXPECT_LT(shifted, 0.5 * plain);
}

TEST(ExecuteTrial, RateViolationFaultsAndTruncates) {
  const CommandSpline c = reference_throw();
  // the joint with the fastest rising speed at 0.2 s gets a limit it crosses right there
  int j = 0;
  for (int i = 1; i < kArmJoints; ++i)
    if (joint_speed(c, i, 0.2) > joint_speed(c, j, 0.2)) j = i;
  ASSERT_GT(joint_speed(c, j, 0.21), joint_speed(c, j, 0.2));
  ASSERT_LT(joint_speed(c, j, 0.19), joint_speed(c, j, 0.2));
  PlantConfig p = exact();
  p.limits.qd_max = JointVec::Constant(100.0);
  p.limits.qd_min = -p.limits.qd_max;
  p.limits.qdd_max = JointVec::Constant(1e4);
  p.limits.tau_max = JointVec::Constant(1e6);
  p.limits.qd_max[j] = joint_speed(c, j, 0.2) / (1.0 + p.fault_tolerance);
  p.limits.qd_min[j] = -p.limits.qd_max[j];
  p.rate_clamp_factor = 100.0;
  const auto m = execute_trial(arm(), c, p, 1);
  ASSERT_TRUE(m.faulted);
  EXPECT_NEAR(m.fault_time, 0.2, 1.0 / kCommandRate + 1e-9);
  EXPECT_NE(m.fault_reason.find("joint " + std::to_string(j + 1)), std::string::npos) << m.fault_reason;
  EXPECT_LT(m.joints.times.back(), m.fault_time);
  EXPECT_LE(m.marker_times.back(), m.fault_time);
  EXPECT_LT(m.rope.size(), steps_to_cover(c.duration, p.rope.dt));

  Demonstration late = perfect_demo();
  EXPECT_THROW(critical_point_error(m, late), TruncatedBeforeCritical);
}

TEST(CriticalPointError, ZeroAgainstItself) {
  const CommandSpline c = reference_throw();
  const auto m = execute_trial(arm(), c, exact(), 2);
  const Demonstration d = demonstration_from_trial(arm(), m, 0.43);
  EXPECT_LE(critical_point_error(m, d).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CriticalPointError, ShiftedMeasurementGivesOffset) {
  const CommandSpline c = reference_throw();
  const auto m = execute_trial(arm(), c, exact(), 2);
  Demonstration d = demonstration_from_trial(arm(), m, 0.43);
  for (auto& p : d.marker_position)
    for (int k = 0; k < d.markers(); ++k) p[3 * k] -= 0.01;  // measured lies 1 cm further along x
  const VecX e = critical_point_error(m, d);
  for (int k = 0; k < d.markers(); ++k) {
    EXPECT_NEAR(e[3 * k], 0.01, 1e-12);
    EXPECT_NEAR(e[3 * k + 1], 0.0, 1e-12);
    EXPECT_NEAR(e[3 * k + 2], 0.0, 1e-12);
  }
  EXPECT_LE(e.tail(3 * d.markers()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CriticalPointError, InterpolationMatchesOversampledMeasurement) {
  const CommandSpline c = reference_throw();
  PlantConfig fast = exact();
  fast.sample_rate = 10 * kCaptureRate;
  const double tc = 0.4025;  // between two 200 Hz samples, on the 2 kHz grid
  const auto coarse = execute_trial(arm(), c, exact(), 2);
  const auto fine = execute_trial(arm(), c, fast, 2);
  const Demonstration oracle = demonstration_from_trial(arm(), fine, tc);
  const int i = static_cast<int>(std::llround(tc * fast.sample_rate));
  ASSERT_NEAR(fine.marker_times[i], tc, 1e-12);
  EXPECT_LE((oracle.marker_state_at(tc).head(33) - fine.markers[i]).cwiseAbs().maxCoeff(), 1e-12);
  const VecX e = critical_point_error(coarse, oracle);
  EXPECT_LE(e.head(33).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(CriticalPointError, DropoutAroundCriticalTimeTruncates) {
  const CommandSpline c = reference_throw();
  auto m = execute_trial(arm(), c, exact(), 2);
  const Demonstration d = demonstration_from_trial(arm(), m, 0.43);
  const int i = static_cast<int>(0.43 * kCaptureRate);
  m.markers[i][4] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(critical_point_error(m, d), TruncatedBeforeCritical);
}

TEST(RunIlc, PerfectModelSucceedsQuickly) {
  IlcConfig cfg;
  cfg.max_iterations = 5;
  cfg.success_rms = 1e-3;
  const IlcResult r = run_ilc(perfect_demo(), arm(), LearnerModel{}, exact(), cfg);
  ASSERT_TRUE(r.success());
  EXPECT_LE(r.trials_to_success, 5);
  EXPECT_EQ(static_cast<int>(r.records.size()), r.trials_to_success);  // stops at the first success
  for (const auto& rec : r.records) {
    EXPECT_TRUE(rec.limits_ok);
    EXPECT_EQ(rec.error.size(), 66);
  }
  EXPECT_LE(r.records.back().rms, 1e-3);
  EXPECT_LT(r.records.back().cost, cfg.success_cost);
}

TEST(RunIlc, DeterministicUnderSeed) {
  IlcConfig cfg;
  cfg.max_iterations = 2;
  cfg.stop_on_first_success = false;
  const PlantConfig p = mismatched_plant(RopeParams{});
  const IlcResult a = run_ilc(perfect_demo(), arm(), LearnerModel{}, p, cfg);
  const IlcResult b = run_ilc(perfect_demo(), arm(), LearnerModel{}, p, cfg);
  ASSERT_EQ(a.records.size(), 2u);
  for (int k = 0; k < 2; ++k) {
    EXPECT_EQ(a.records[k].cost, b.records[k].cost);
    EXPECT_EQ(a.records[k].command.knots, b.records[k].command.knots);
  }
  EXPECT_NE(a.records[0].seed, a.records[1].seed);
}

TEST(RunIlc, StiffnessMismatchLearnsWithinBudget) {
  PlantConfig p = mismatched_plant(RopeParams{});
  p.rope.k = 10.0 * RopeParams{}.k;
  IlcConfig cfg;
  const Demonstration demo = standard_demonstration(arm(), p, 42);
  const IlcResult r = run_ilc(demo, arm(), LearnerModel{}, p, cfg);
  EXPECT_TRUE(r.success());
  EXPECT_LE(r.trials_to_success, 10);
}

TEST(RunIlc, ZeroIterationsRejected) {
  IlcConfig cfg;
  cfg.max_iterations = 0;
  EXPECT_THROW(run_ilc(perfect_demo(), arm(), LearnerModel{}, exact(), cfg), ConfigError);
}

TEST(RunIlc, MarkerCountMismatchRejected) {
  PlantConfig p = exact();
  p.marker_stride = 11;
  EXPECT_THROW(run_ilc(perfect_demo(), arm(), LearnerModel{}, p, IlcConfig{}), ConfigError);
}

TEST(RunIlc, DoubleTruncationRaisesWithRecords) {
  PlantConfig p = exact();
  p.limits.qd_max *= 0.2;
  p.limits.qd_min *= 0.2;
  try {
    run_ilc(perfect_demo(), arm(), LearnerModel{}, p, IlcConfig{});
    FAIL() << "expected IlcError";
  } catch (const IlcError& e) {
    ASSERT_EQ(e.records.size(), 1u);
    EXPECT_TRUE(e.records[0].retried);
    EXPECT_TRUE(e.records[0].truncated);
    EXPECT_TRUE(e.records[0].measured.faulted);
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(RunIlc, CommandOutsideLearnerLimitsIsInfeasible) {
  LearnerModel l;
  l.limits.qd_max *= 0.1;
  l.limits.qd_min *= 0.1;
  const CommandSpline start = perturb_command(reference_throw(), 0.05, 7);
  try {
    run_ilc(perfect_demo(), arm(), l, mismatched_plant(RopeParams{}), IlcConfig{}, &start);
    FAIL() << "expected IlcError";
  } catch (const IlcError& e) {
    ASSERT_FALSE(e.records.empty());
    EXPECT_FALSE(e.records.back().limits_ok);
    EXPECT_EQ(e.records.back().qp_status, QpStatus::Infeasible);
  }
}

TEST(Trials, SentinelFormatting) {
  EXPECT_EQ(format_trials(3, 10), "3");
  EXPECT_EQ(format_trials(11, 10), ">10");
  IlcResult r;
  IlcConfig cfg;
  cfg.max_iterations = 4;
  EXPECT_EQ(trials_or_sentinel(r, cfg), 5);
}

TEST(Transfer, IdenticalPlantsNeedOneTrial) {
  const PlantConfig p = exact();
  IlcConfig cfg;
  cfg.max_iterations = 5;
  const LearnOutcome o = learn(perfect_demo(), arm(), LearnerModel{}, p, cfg);
  ASSERT_LE(o.trials, 5);
  const TransferMatrix m =
      transfer_experiment({o.command, o.command}, {p, p}, {"a", "b"}, perfect_demo(), arm(), LearnerModel{}, cfg, 2);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) EXPECT_EQ(m.trials[a][b], 1);
}

TEST(Transfer, CsvRoundTripKeepsSentinel) {
  TransferMatrix m;
  m.labels = {"1", "4", "6"};
  m.K = 10;
  m.trials = {{1, 2, 11}, {3, 1, 2}, {11, 11, 1}};
  std::stringstream ss;
  write_transfer_csv(m, 77, ss);
  EXPECT_EQ(ss.str().rfind("# seed=77\n", 0), 0u);
  EXPECT_NE(ss.str().find(",>10"), std::string::npos);
  const TransferMatrix back = read_transfer_csv(ss);
  EXPECT_EQ(back.labels, m.labels);
  EXPECT_EQ(back.trials, m.trials);
  EXPECT_THROW(transfer_experiment({}, {exact()}, {"a"}, perfect_demo(), arm(), LearnerModel{}, IlcConfig{}), ConfigError);
}

TEST(Sweep, GridParsing) {
  std::stringstream ok("k,m_e\n1e5,5\n# comment\n\n1e4, 5\n1e3,5\n1e2,5\n1e5,1\n1e5,10\n");
  const auto g = read_sweep_grid(ok);
  ASSERT_EQ(g.size(), 6u);
  EXPECT_DOUBLE_EQ(g[1].k, 1e4);
  EXPECT_DOUBLE_EQ(g[5].m_e, 10.0);
  for (const std::string bad : {"1e5,5\n1e4\n", "1e5,5\n1e4,5,3\n", "1e5,5\nabc,5\n", "1e5,5\n-1,5\n", "1e5,5\n1e4,5x\n"}) {
    std::stringstream ss(bad);
    try {
      read_sweep_grid(ss);
      FAIL() << bad;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    }
  }
  std::stringstream empty("k,m_e\n");
  EXPECT_THROW(read_sweep_grid(empty), ConfigError);
}

TEST(Sweep, RowsFollowGridAndUseSentinel) {
  IlcConfig cfg;
  cfg.max_iterations = 1;
  cfg.success_cost = 1e-12;  // unreachable, so every row reports >1
  const PlantConfig p = mismatched_plant(RopeParams{});
  const std::vector<SweepPoint> grid{{1e5, 5.0}, {1e4, 5.0}};
  const auto rows = sensitivity_sweep(perfect_demo(), arm(), LearnerModel{}, p, grid, cfg, 2);
  const auto again = sensitivity_sweep(perfect_demo(), arm(), LearnerModel{}, p, grid, cfg, 1);
  ASSERT_EQ(rows.size(), 2u);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(rows[i].point.k, grid[i].k);
    EXPECT_EQ(rows[i].outcome.trials, 2);
    EXPECT_EQ(rows[i].outcome.final_cost, again[i].outcome.final_cost);
  }
  std::stringstream ss;
  write_sweep_csv(rows, cfg.max_iterations, 9, ss);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "# seed=9");
  std::getline(ss, line);
  EXPECT_EQ(line, "k,m_e,trials,final_cost,final_rms_m");
  std::getline(ss, line);
  EXPECT_EQ(line.rfind("100000,5,>1,", 0), 0u) << line;
}

TEST(Logs, RunLogAndSummary) {
  IlcConfig cfg;
  cfg.max_iterations = 2;
  cfg.stop_on_first_success = false;
  const IlcResult r = run_ilc(perfect_demo(), arm(), LearnerModel{}, exact(), cfg);
  std::stringstream log, sum;
  write_run_log(r.records, 123, log);
  write_summary_csv(r.records, 123, sum);
  std::string line;
  std::getline(log, line);
  const auto h = nlohmann::json::parse(line);
  EXPECT_EQ(h["header"]["seed"].get<std::uint64_t>(), 123u);
  int n = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["iteration"].get<int>(), n);
    EXPECT_TRUE(j.contains("cost"));
    EXPECT_EQ(j["error"].size(), 66u);
    EXPECT_EQ(j.contains("qp_status"), n == 0);
    ++n;
  }
  EXPECT_EQ(n, 2);
  std::getline(sum, line);
  EXPECT_EQ(line, "# seed=123");
  std::getline(sum, line);
  EXPECT_EQ(line, "iteration,cost,rms_m,success");
  int rows = 0;
  while (std::getline(sum, line)) ++rows;
  EXPECT_EQ(rows, 2);
}

TEST(Logs, RolloutRoundTrips) {
  const auto m = execute_trial(arm(), reference_throw(), exact(), 4);
  std::stringstream js, cs;
  write_rollout_jsonl(m.rope, 4, js);
  const RopeTrajectory a = read_rollout_jsonl(js);
  EXPECT_EQ(a.seed, 4u);
  ASSERT_EQ(a.rollout.size(), m.rope.size());
  EXPECT_EQ(a.rollout.states[17].p, m.rope.states[17].p);
  EXPECT_EQ(a.rollout.states[17].v.size(), 33);
  write_rollout_csv(a.rollout, a.seed, cs);
  const RopeTrajectory b = read_rollout_csv(cs);
  EXPECT_EQ(b.seed, 4u);
  ASSERT_EQ(b.rollout.size(), m.rope.size());
  EXPECT_EQ(b.rollout.states.back().v, m.rope.states.back().v);
  std::stringstream broken("{\"header\":{\"seed\":1,\"N\":2,\"dt\":0.005,\"frames\":1}}\n{\"p\":[1,2],\"v\":[1,2]}\n");
  EXPECT_THROW(read_rollout_jsonl(broken), ConfigError);
}
