#pragma once

// Task-level iterative learning: trial, critical-point error, inverse model, update.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "taskilc/init_guess.hpp"
#include "taskilc/inverse_model.hpp"
#include "taskilc/plant.hpp"
#include "taskilc/rng.hpp"

namespace taskilc {

enum class ObjectiveMode { CriticalPoint, EqualWeighted };

inline const char* to_string(ObjectiveMode m) {
  return m == ObjectiveMode::CriticalPoint ? "critical-point" : "equal-weighted";
}

inline ObjectiveMode objective_mode_from_string(const std::string& s) {
  if (s == "critical-point") return ObjectiveMode::CriticalPoint;
  if (s == "equal-weighted") return ObjectiveMode::EqualWeighted;
  throw ConfigError("unknown objective mode '" + s + "' (critical-point or equal-weighted)");
}

struct IlcConfig {
  int max_iterations = 10;  // K
  double success_cost = 0.25;  // on |x~|_Q^2
  double success_rms = std::numeric_limits<double>::infinity();  // optional bound on marker RMS (m)
  ObjectiveMode mode = ObjectiveMode::CriticalPoint;
  bool stop_on_first_success = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (max_iterations < 1) throw ConfigError("ilc: max_iterations must be >= 1");
    if (!(success_cost > 0.0)) throw ConfigError("ilc: success threshold must be > 0");
    if (!(success_rms > 0.0)) throw ConfigError("ilc: success RMS must be > 0");
  }
};

/// Everything the learner knows: its rope model, QP weights and limits.
struct LearnerModel {
  RopeParams rope;
  QpWeights weights;
  InverseModelOptions options;
  JointLimits limits = JointLimits::defaults();
  TrackingWeights tracking;
  TrackingOptions tracking_options;

  void validate() const {
    rope.validate();
    weights.validate();
    limits.validate();
    tracking.validate();
  }
};

struct TrialRecord {
  int iteration = 0;
  std::uint64_t seed = 0;
  CommandSpline command;
  MeasuredRollout measured;
  VecX error;  // [positions; velocities] at t_c, empty if truncated
  double cost = 0.0;
  double rms = 0.0;
  bool success = false;
  bool truncated = false;
  bool retried = false;
  bool limits_ok = true;  // command passes the position/rate/acceleration bounds
  double wall_time = 0.0;
  // inverse model after this trial (absent on the last one)
  bool updated = false;
  QpStatus qp_status = QpStatus::Optimal;
  double qp_objective = 0.0;
  double qp_objective_at_zero = 0.0;
  double kkt_residual = 0.0;
  std::string rollout_file;
};

struct IlcResult {
  std::vector<TrialRecord> records;
  CommandSpline initial;
  CommandSpline final_command;  // last executed command
  int trials_to_success = 0;    // 1-based; 0 if never successful
  bool success() const { return trials_to_success > 0; }
};

class IlcError : public std::runtime_error {
 public:
  IlcError(const std::string& what, std::vector<TrialRecord> recs) : std::runtime_error(what), records(std::move(recs)) {}
  std::vector<TrialRecord> records;
};

inline double weighted_cost(const VecX& err, const QpWeights& w) {
  return err.dot(w.critical_weights(static_cast<int>(err.size()) / 6).cwiseProduct(err));
}

inline double marker_rms(const VecX& err) {
  const int n = static_cast<int>(err.size()) / 6;
  return n ? std::sqrt(err.head(3 * n).squaredNorm() / n) : 0.0;
}

/// Measured minus demonstrated state at an arbitrary time before t_c.
inline VecX state_error_at(const MeasuredRollout& m, const Demonstration& demo, double t) {
  const VecX p = lagrange_at(m.marker_times, m.markers, t);
  const VecX v = lagrange_at(m.marker_times, m.marker_velocity, t);
  const VecX d = demo.marker_state_at(t);
  const int k = static_cast<int>(p.size());
  VecX e(2 * k);
  e.head(k) = p - d.head(k);
  e.tail(k) = v - d.tail(k);
  return e;
}

inline bool command_within_limits(const ChainSpec& chain, const CommandSpline& c, const JointLimits& limits) {
  JointTrajectory tr = sample_command(chain, c);
  tr.tau.resize(0, 0);
  return check_limits(tr, limits).empty();
}

/// Runs the learning loop. Without `initial`, u_0 comes from tracking the demonstrated hand.
inline IlcResult run_ilc(const Demonstration& demo, const ChainSpec& chain, const LearnerModel& learner,
                         const PlantConfig& plant, const IlcConfig& cfg, const CommandSpline* initial = nullptr) {
  cfg.validate();
  learner.validate();
  plant.validate();
  demo.validate();
  if (plant.markers() != demo.markers() || learner.rope.N != demo.markers())
    throw ConfigError("ilc: learner rope, plant markers and demonstration must agree on the marker count");

  IlcResult res;
  res.initial = initial ? *initial : track_demonstration(demo, chain, learner.limits, learner.tracking,
                                                         learner.tracking_options).command;
  CommandSpline u = res.initial;

  InverseModelContext ctx;
  ctx.chain = chain;
  ctx.rope = learner.rope;
  ctx.demo = &demo;
  ctx.limits = learner.limits;
  ctx.weights = learner.weights;
  ctx.options = learner.options;
  ctx.options.equal_weighted = cfg.mode == ObjectiveMode::EqualWeighted;
  const auto extra_times =
      ctx.options.equal_weighted ? equal_weight_times(demo.t_c, learner.rope.dt, ctx.options.equal_stride)
                                 : std::vector<double>{};

  for (int k = 0; k < cfg.max_iterations; ++k) {
    const auto start = std::chrono::steady_clock::now();
    TrialRecord rec;
    rec.iteration = k;
    rec.command = u;
    rec.limits_ok = command_within_limits(chain, u, learner.limits);
    rec.seed = derive_seed(cfg.seed, "trial", static_cast<std::uint64_t>(k));
    rec.measured = execute_trial(chain, u, plant, rec.seed);
    try {
      rec.error = critical_point_error(rec.measured, demo);
    } catch (const TruncatedBeforeCritical&) {
      rec.retried = true;
      rec.seed = derive_seed(cfg.seed, "trial-retry", static_cast<std::uint64_t>(k));
      rec.measured = execute_trial(chain, u, plant, rec.seed);
      try {
        rec.error = critical_point_error(rec.measured, demo);
      } catch (const TruncatedBeforeCritical& e) {
        rec.truncated = true;
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        res.records.push_back(std::move(rec));
        throw IlcError(std::string("trial ") + std::to_string(k + 1) + " truncated twice: " + e.what(), res.records);
      }
    }
    rec.cost = weighted_cost(rec.error, learner.weights);
    rec.rms = marker_rms(rec.error);
    rec.success = rec.cost < cfg.success_cost && rec.rms <= cfg.success_rms;
    if (rec.success && res.trials_to_success == 0) res.trials_to_success = k + 1;
    res.final_command = u;

    const bool stop = (rec.success && cfg.stop_on_first_success) || k + 1 == cfg.max_iterations;
    if (!stop) {
      std::vector<VecX> extra;
      for (double t : extra_times) extra.push_back(state_error_at(rec.measured, demo, t));
      ctx.command = u;
      InverseModelResult im;
      try {
        im = inverse_model(rec.error, ctx, extra);
      } catch (const std::exception& e) {
        res.records.push_back(std::move(rec));
        throw IlcError(std::string("inverse model failed at trial ") + std::to_string(k + 1) + ": " + e.what(),
                       res.records);
      }
      rec.updated = true;
      rec.qp_status = im.update.status;
      rec.qp_objective = im.update.objective;
      rec.qp_objective_at_zero = im.update.objective_at_zero;
      rec.kkt_residual = im.update.kkt_residual;
      if (im.update.status == QpStatus::Infeasible) {
        res.records.push_back(std::move(rec));
        throw IlcError("inverse model infeasible at trial " + std::to_string(k + 1) +
                           ": the current command violates a joint limit",
                       res.records);
      }
      u.knots -= im.update.delta_u;
    }
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.records.push_back(std::move(rec));
    if (stop) break;
  }
  return res;
}

/// Trials to success, or max_iterations + 1 when learning did not succeed (printed as ">K").
inline int trials_or_sentinel(const IlcResult& r, const IlcConfig& cfg) {
  return r.success() ? r.trials_to_success : cfg.max_iterations + 1;
}

inline std::string format_trials(int trials, int K) { return trials > K ? ">" + std::to_string(K) : std::to_string(trials); }

/// Runs `count` independent jobs on up to `jobs` threads; results land in job order.
inline void parallel_for(int count, int jobs, const std::function<void(int)>& fn) {
  jobs = std::max(1, std::min(jobs, count));
  if (jobs == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j)
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

struct LearnOutcome {
  int trials = 0;  // trials_or_sentinel
  double final_cost = 0.0;
  double final_rms = 0.0;
  CommandSpline command;  // command of the last trial
  std::string failure;    // non-empty when the run aborted
};

inline LearnOutcome learn(const Demonstration& demo, const ChainSpec& chain, const LearnerModel& learner,
                          const PlantConfig& plant, const IlcConfig& cfg, const CommandSpline* initial = nullptr) {
  LearnOutcome out;
  try {
    const auto r = run_ilc(demo, chain, learner, plant, cfg, initial);
    out.trials = trials_or_sentinel(r, cfg);
    out.final_cost = r.records.back().cost;
    out.final_rms = r.records.back().rms;
    out.command = r.final_command;
  } catch (const IlcError& e) {
    out.trials = cfg.max_iterations + 1;
    out.failure = e.what();
    if (!e.records.empty()) {
      out.final_cost = e.records.back().cost;
      out.final_rms = e.records.back().rms;
      out.command = e.records.back().command;
    }
  }
  return out;
}

struct TransferMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<int>> trials;  // [source][target]
  int K = 10;
};

/// Starts learning on every target plant from every source's learned command.
inline TransferMatrix transfer_experiment(const std::vector<CommandSpline>& learned, const std::vector<PlantConfig>& plants,
                                          const std::vector<std::string>& labels, const Demonstration& demo,
                                          const ChainSpec& chain, const LearnerModel& learner, const IlcConfig& cfg,
                                          int jobs = 1) {
  const int n = static_cast<int>(plants.size());
  if (n < 2 || static_cast<int>(learned.size()) != n || static_cast<int>(labels.size()) != n)
    throw ConfigError("transfer: need at least two presets with one learned command each");
  TransferMatrix m;
  m.labels = labels;
  m.K = cfg.max_iterations;
  m.trials.assign(n, std::vector<int>(n, 0));
  parallel_for(n * n, jobs, [&](int cell) {
    const int a = cell / n, b = cell % n;
    IlcConfig c = cfg;
    c.seed = derive_seed(cfg.seed, "transfer", static_cast<std::uint64_t>(cell));
    m.trials[a][b] = learn(demo, chain, learner, plants[b], c, &learned[a]).trials;
  });
  return m;
}

inline void write_transfer_csv(const TransferMatrix& m, std::uint64_t seed, std::ostream& out) {
  out << "# seed=" << seed << "\n# rows: source of the command, columns: target plant\nsource";
  for (const auto& l : m.labels) out << ',' << l;
  out << "\n";
  for (std::size_t a = 0; a < m.labels.size(); ++a) {
    out << m.labels[a];
    for (int t : m.trials[a]) out << ',' << format_trials(t, m.K);
    out << "\n";
  }
}

inline TransferMatrix read_transfer_csv(std::istream& in) {
  TransferMatrix m;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (header) {
      m.labels.assign(cells.begin() + 1, cells.end());
      header = false;
      continue;
    }
    std::vector<int> row;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      if (!cells[i].empty() && cells[i][0] == '>') {
        m.K = std::stoi(cells[i].substr(1));
        row.push_back(m.K + 1);
      } else {
        row.push_back(std::stoi(cells[i]));
      }
    }
    m.trials.push_back(row);
  }
  return m;
}

struct SweepPoint {
  double k = 1e5;
  double m_e = 5.0;
};

struct SweepRow {
  SweepPoint point;
  LearnOutcome outcome;
};

/// Learns with each grid point as the learner's rope model; the plant stays fixed.
inline std::vector<SweepRow> sensitivity_sweep(const Demonstration& demo, const ChainSpec& chain,
                                               const LearnerModel& learner, const PlantConfig& plant,
                                               const std::vector<SweepPoint>& grid, const IlcConfig& cfg,
                                               int jobs = 1) {
  if (grid.empty()) throw ConfigError("sweep: empty grid");
  std::vector<SweepRow> rows(grid.size());
  parallel_for(static_cast<int>(grid.size()), jobs, [&](int i) {
    LearnerModel l = learner;
    l.rope.k = grid[i].k;
    l.rope.m_e = grid[i].m_e;
    rows[i].point = grid[i];
    rows[i].outcome = learn(demo, chain, l, plant, cfg);
  });
  return rows;
}

inline std::vector<SweepPoint> read_sweep_grid(std::istream& in) {
  std::vector<SweepPoint> grid;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    if (line.rfind("k", first) == first && line.find("m_e") != std::string::npos) continue;  // header
    std::stringstream ss(line);
    std::string a, b, rest;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || std::getline(ss, rest, ','))
      throw ConfigError("sweep grid line " + std::to_string(line_no) + ": expected 'k,m_e'");
    try {
      std::size_t pa = 0, pb = 0;
      SweepPoint p{std::stod(a, &pa), std::stod(b, &pb)};
      if (a.find_first_not_of(" \t", pa) != std::string::npos || b.find_first_not_of(" \t", pb) != std::string::npos)
        throw std::invalid_argument("trailing");
      if (!(p.k > 0.0) || !(p.m_e > 0.0)) throw std::invalid_argument("nonpositive");
      grid.push_back(p);
    } catch (const std::exception&) {
      throw ConfigError("sweep grid line " + std::to_string(line_no) + ": expected two positive numbers 'k,m_e'");
    }
  }
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  return grid;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, int K, std::uint64_t seed, std::ostream& out) {
  out << "# seed=" << seed << "\nk,m_e,trials,final_cost,final_rms_m\n";
  for (const auto& r : rows)
    out << format_double(r.point.k) << ',' << format_double(r.point.m_e) << ',' << format_trials(r.outcome.trials, K)
        << ',' << format_double(r.outcome.final_cost) << ',' << format_double(r.outcome.final_rms) << "\n";
}

// --- logs --------------------------------------------------------------------------------------

inline nlohmann::json record_to_json(const TrialRecord& r) {
  nlohmann::json j;
  j["iteration"] = r.iteration;
  j["seed"] = r.seed;
  j["command"] = spline_to_json(r.command);
  j["cost"] = r.cost;
  j["rms_m"] = r.rms;
  j["success"] = r.success;
  j["truncated"] = r.truncated;
  j["retried"] = r.retried;
  j["limits_ok"] = r.limits_ok;
  j["faulted"] = r.measured.faulted;
  if (r.measured.faulted) {
    j["fault_time"] = r.measured.fault_time;
    j["fault_reason"] = r.measured.fault_reason;
  }
  j["error"] = vec_to_json(r.error);
  j["wall_time_s"] = r.wall_time;
  if (r.updated) {
    j["qp_status"] = to_string(r.qp_status);
    j["qp_objective"] = r.qp_objective;
    j["qp_objective_at_zero"] = r.qp_objective_at_zero;
    j["kkt_residual"] = r.kkt_residual;
  }
  if (!r.rollout_file.empty()) j["rollout_file"] = r.rollout_file;
  return j;
}

inline void write_run_log(const std::vector<TrialRecord>& recs, std::uint64_t seed, std::ostream& out) {
  nlohmann::json h;
  h["header"] = {{"seed", seed}, {"records", recs.size()}};
  out << h.dump() << "\n";
  for (const auto& r : recs) out << record_to_json(r).dump() << "\n";
}

inline void write_summary_csv(const std::vector<TrialRecord>& recs, std::uint64_t seed, std::ostream& out) {
  out << "# seed=" << seed << "\niteration,cost,rms_m,success\n";
  for (const auto& r : recs)
    out << r.iteration << ',' << format_double(r.cost) << ',' << format_double(r.rms) << ',' << (r.success ? 1 : 0)
        << "\n";
}

/// True rope trajectory of a trial, one JSON object per step after a header line.
inline void write_rollout_jsonl(const Rollout& r, std::uint64_t seed, std::ostream& out) {
  nlohmann::json h;
  const int N = r.states.empty() ? 0 : static_cast<int>(r.states.front().p.size() / 3);
  h["header"] = {{"seed", seed}, {"N", N}, {"dt", r.dt}, {"frames", r.size()}};
  out << h.dump() << "\n";
  for (int k = 0; k < r.size(); ++k) {
    nlohmann::json j;
    j["t"] = r.time(k);
    j["p"] = vec_to_json(r.states[k].p);
    j["v"] = vec_to_json(r.states[k].v);
    out << j.dump() << "\n";
  }
}

struct RopeTrajectory {
  std::uint64_t seed = 0;
  Rollout rollout;  // positions and velocities only
};

inline RopeTrajectory read_rollout_jsonl(std::istream& in) {
  RopeTrajectory out;
  std::string line;
  int line_no = 0;
  int N = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("rollout line " + std::to_string(line_no) + ": not JSON");
    }
    if (j.contains("header")) {
      out.seed = j["header"].at("seed").get<std::uint64_t>();
      out.rollout.dt = j["header"].at("dt").get<double>();
      N = j["header"].at("N").get<int>();
      continue;
    }
    if (N < 0) throw ConfigError("rollout: header line missing");
    RopeState s;
    s.p = vec_from_json(j.at("p"));
    s.v = vec_from_json(j.at("v"));
    if (s.p.size() != 3 * N || s.v.size() != 3 * N)
      throw ConfigError("rollout line " + std::to_string(line_no) + ": expected 3N values");
    out.rollout.states.push_back(std::move(s));
  }
  if (N < 0) throw ConfigError("rollout: empty file");
  return out;
}

inline void write_rollout_csv(const Rollout& r, std::uint64_t seed, std::ostream& out) {
  const int N = r.states.empty() ? 0 : static_cast<int>(r.states.front().p.size() / 3);
  out << "# seed=" << seed << "\n# dt=" << format_double(r.dt) << "\nt";
  for (const char* kind : {"p", "v"})
    for (int i = 0; i < N; ++i)
      for (const char* a : {"x", "y", "z"}) out << ',' << kind << i << '_' << a;
  out << "\n";
  for (int k = 0; k < r.size(); ++k) {
    out << format_double(r.time(k));
    for (const VecX* x : {&r.states[k].p, &r.states[k].v})
      for (int i = 0; i < x->size(); ++i) out << ',' << format_double((*x)[i]);
    out << "\n";
  }
}

inline RopeTrajectory read_rollout_csv(std::istream& in) {
  RopeTrajectory out;
  std::string line;
  int columns = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# seed=", 0) == 0) {
      out.seed = std::stoull(line.substr(7));
      continue;
    }
    if (line.rfind("# dt=", 0) == 0) {
      out.rollout.dt = std::stod(line.substr(5));
      continue;
    }
    if (line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (columns < 0) {
      columns = static_cast<int>(cells.size());
      if ((columns - 1) % 6 != 0) throw ConfigError("rollout CSV: expected t plus 6N columns");
      continue;
    }
    if (static_cast<int>(cells.size()) != columns) throw ConfigError("rollout CSV: ragged row");
    const int n3 = (columns - 1) / 2;
    RopeState s;
    s.p.resize(n3);
    s.v.resize(n3);
    for (int i = 0; i < n3; ++i) {
      s.p[i] = std::stod(cells[1 + i]);
      s.v[i] = std::stod(cells[1 + n3 + i]);
    }
    out.rollout.states.push_back(std::move(s));
  }
  if (columns < 0) throw ConfigError("rollout CSV: empty file");
  return out;
}

}  // namespace taskilc
