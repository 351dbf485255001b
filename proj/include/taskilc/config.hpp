#pragma once

// Experiment configuration: a flat "key = value" text file with dotted keys.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "taskilc/ilc.hpp"
#include "taskilc/scenario.hpp"

namespace taskilc {

enum class DemoSource { Capture, Throw, Target };

inline const char* to_string(DemoSource s) {
  switch (s) {
    case DemoSource::Capture: return "capture";
    case DemoSource::Throw: return "throw";
    case DemoSource::Target: return "target";
  }
  return "?";
}

inline DemoSource demo_source_from_string(const std::string& s) {
  if (s == "capture") return DemoSource::Capture;
  if (s == "throw") return DemoSource::Throw;
  if (s == "target") return DemoSource::Target;
  throw ConfigError("unknown demo source '" + s + "' (capture, throw or target)");
}

struct DemoSettings {
  DemoSource source = DemoSource::Throw;
  std::string capture;     // CSV, for source = capture
  std::string annotation;  // JSON with t_c and the coarse window
  double duration = kDemoDuration;
  double t_c_fraction = kDemoCriticalFraction;  // throw: fraction of the motion
  double t_c = kTargetCriticalTime;             // target: absolute time
  double perturbation = 0.05;                   // target: knot perturbation (rad)
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string chain;  // JSON chain file; empty for the built-in arm
  std::string output_dir = "out";
  DemoSettings demo;
  LearnerModel learner;
  PlantConfig plant = mismatched_plant(RopeParams{});
  bool plant_fine = false;
  IlcConfig ilc;

  void validate() const {
    learner.validate();
    plant.validate();
    ilc.validate();
    if (plant.preset < 0 || plant.preset > 7) throw ConfigError("plant.preset must be 0 (custom) or 1..7");
    if (!(demo.duration > 0.0)) throw ConfigError("demo.duration must be positive");
    if (!(demo.t_c_fraction > 0.0 && demo.t_c_fraction < 1.0)) throw ConfigError("demo.t_c_fraction must be in (0, 1)");
    if (!(demo.t_c > 0.0)) throw ConfigError("demo.t_c must be positive");
    if (!(demo.perturbation >= 0.0)) throw ConfigError("demo.perturbation must be >= 0");
    if (demo.source == DemoSource::Capture && (demo.capture.empty() || demo.annotation.empty()))
      throw ConfigError("demo.source = capture needs demo.capture and demo.annotation");
  }

  /// The plant as executed: a preset replaces the custom rope.
  PlantConfig resolved_plant() const {
    if (plant.preset == 0) return plant;
    PlantConfig p = load_preset(plant.preset, plant_fine, learner.rope);
    p.servo_tau = plant.servo_tau;
    p.rate_clamp_factor = plant.rate_clamp_factor;
    p.limits = plant.limits;
    p.fault_tolerance = plant.fault_tolerance;
    p.sample_rate = plant.sample_rate;
    p.noise_std = plant.noise_std;
    p.dropout = plant.dropout;
    return p;
  }
};

namespace config_detail {

using FieldRef = std::variant<double*, int*, bool*, std::string*, std::uint64_t*, JointVec*, ObjectiveMode*, DemoSource*>;

struct Field {
  std::string key;
  FieldRef ref;
};

inline void limits_fields(std::vector<Field>& f, const std::string& prefix, JointLimits& l) {
  f.push_back({prefix + "q_min", &l.q_min});
  f.push_back({prefix + "q_max", &l.q_max});
  f.push_back({prefix + "qd_min", &l.qd_min});
  f.push_back({prefix + "qd_max", &l.qd_max});
  f.push_back({prefix + "qdd_min", &l.qdd_min});
  f.push_back({prefix + "qdd_max", &l.qdd_max});
  f.push_back({prefix + "tau_min", &l.tau_min});
  f.push_back({prefix + "tau_max", &l.tau_max});
}

inline void rope_fields(std::vector<Field>& f, const std::string& prefix, RopeParams& r) {
  f.push_back({prefix + "k", &r.k});
  f.push_back({prefix + "b", &r.b});
  f.push_back({prefix + "m_e", &r.m_e});
  f.push_back({prefix + "m", &r.m});
  f.push_back({prefix + "l", &r.l});
  f.push_back({prefix + "N", &r.N});
  f.push_back({prefix + "dt", &r.dt});
}

/// Every configurable field, in file order.
inline std::vector<Field> fields(ExperimentConfig& c) {
  std::vector<Field> f;
  f.push_back({"seed", &c.seed});
  f.push_back({"paths.chain", &c.chain});
  f.push_back({"paths.output_dir", &c.output_dir});

  f.push_back({"demo.source", &c.demo.source});
  f.push_back({"demo.capture", &c.demo.capture});
  f.push_back({"demo.annotation", &c.demo.annotation});
  f.push_back({"demo.duration", &c.demo.duration});
  f.push_back({"demo.t_c_fraction", &c.demo.t_c_fraction});
  f.push_back({"demo.t_c", &c.demo.t_c});
  f.push_back({"demo.perturbation", &c.demo.perturbation});

  rope_fields(f, "model.", c.learner.rope);

  QpWeights& w = c.learner.weights;
  f.push_back({"qp.w_control", &w.w_control});
  f.push_back({"qp.w_critical_pos", &w.w_critical_pos});
  f.push_back({"qp.w_critical_vel", &w.w_critical_vel});
  f.push_back({"qp.w_pc", &w.w_pc});
  f.push_back({"qp.w_vc", &w.w_vc});
  f.push_back({"qp.w_Rc", &w.w_Rc});
  f.push_back({"qp.w_pft", &w.w_pft});
  f.push_back({"qp.w_vft", &w.w_vft});
  f.push_back({"qp.w_Rft", &w.w_Rft});
  f.push_back({"qp.w_ft_velocity", &w.w_ft_velocity});

  InverseModelOptions& o = c.learner.options;
  f.push_back({"inverse.limit_samples", &o.limit_samples});
  f.push_back({"inverse.torque_samples", &o.torque_samples});
  f.push_back({"inverse.equal_stride", &o.equal_stride});
  f.push_back({"inverse.equal_average", &o.equal_average});
  f.push_back({"inverse.bound_margin", &o.bound_margin});
  f.push_back({"inverse.rest_boundaries", &o.rest_boundaries});

  TrackingWeights& t = c.learner.tracking;
  f.push_back({"tracking.w_p", &t.w_p});
  f.push_back({"tracking.w_R", &t.w_R});
  f.push_back({"tracking.w_v", &t.w_v});
  f.push_back({"tracking.w_j", &t.w_j});
  f.push_back({"tracking.z_min", &t.z_min});
  f.push_back({"tracking.max_iterations", &c.learner.tracking_options.max_iterations});

  limits_fields(f, "limits.", c.learner.limits);

  PlantConfig& p = c.plant;
  f.push_back({"plant.preset", &p.preset});
  f.push_back({"plant.fine", &c.plant_fine});
  rope_fields(f, "plant.", p.rope);
  f.push_back({"plant.marker_stride", &p.marker_stride});
  f.push_back({"plant.servo_tau", &p.servo_tau});
  f.push_back({"plant.rate_clamp_factor", &p.rate_clamp_factor});
  f.push_back({"plant.fault_tolerance", &p.fault_tolerance});
  f.push_back({"plant.sample_rate", &p.sample_rate});
  f.push_back({"plant.noise_std", &p.noise_std});
  f.push_back({"plant.dropout", &p.dropout});
  limits_fields(f, "plant.limits.", p.limits);

  f.push_back({"ilc.max_iterations", &c.ilc.max_iterations});
  f.push_back({"ilc.success_cost", &c.ilc.success_cost});
  f.push_back({"ilc.success_rms", &c.ilc.success_rms});
  f.push_back({"ilc.mode", &c.ilc.mode});
  f.push_back({"ilc.stop_on_first_success", &c.ilc.stop_on_first_success});
  return f;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& s) {
  std::size_t pos = 0;
  const std::string v = trim(s);
  double x = 0.0;
  if (v == "inf") return std::numeric_limits<double>::infinity();
  x = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("trailing characters");
  return x;
}

inline void assign(const FieldRef& ref, const std::string& value) {
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, double>) {
          *p = parse_double(value);
        } else if constexpr (std::is_same_v<T, int>) {
          std::size_t pos = 0;
          *p = std::stoi(value, &pos);
          if (pos != value.size()) throw std::invalid_argument("not an integer");
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
          std::size_t pos = 0;
          if (value.empty() || value[0] == '-') throw std::invalid_argument("negative");
          *p = std::stoull(value, &pos);
          if (pos != value.size()) throw std::invalid_argument("not an integer");
        } else if constexpr (std::is_same_v<T, bool>) {
          if (value == "true") *p = true;
          else if (value == "false") *p = false;
          else throw std::invalid_argument("expected true or false");
        } else if constexpr (std::is_same_v<T, std::string>) {
          *p = value;
        } else if constexpr (std::is_same_v<T, JointVec>) {
          std::stringstream ss(value);
          std::string item;
          std::vector<double> xs;
          while (std::getline(ss, item, ',')) xs.push_back(parse_double(item));
          if (xs.size() != static_cast<std::size_t>(kArmJoints)) throw std::invalid_argument("expected 7 values");
          for (int j = 0; j < kArmJoints; ++j) (*p)[j] = xs[j];
        } else if constexpr (std::is_same_v<T, ObjectiveMode>) {
          *p = objective_mode_from_string(value);
        } else {
          *p = demo_source_from_string(value);
        }
      },
      ref);
}

inline std::string render(const FieldRef& ref) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, double>) return std::isinf(*p) && *p > 0 ? "inf" : format_double(*p);
        else if constexpr (std::is_same_v<T, int> || std::is_same_v<T, std::uint64_t>) return std::to_string(*p);
        else if constexpr (std::is_same_v<T, bool>) return *p ? "true" : "false";
        else if constexpr (std::is_same_v<T, std::string>) return *p;
        else if constexpr (std::is_same_v<T, JointVec>) {
          std::string s;
          for (int j = 0; j < kArmJoints; ++j) s += (j ? "," : "") + format_double((*p)[j]);
          return s;
        } else return to_string(*p);
      },
      ref);
}

inline bool same(const FieldRef& a, const FieldRef& b) {
  return std::visit(
      [&](auto* pa) {
        using P = decltype(pa);
        const P pb = std::get<P>(b);
        if constexpr (std::is_same_v<P, double*>) return *pa == *pb || (std::isnan(*pa) && std::isnan(*pb));
        else if constexpr (std::is_same_v<P, JointVec*>) return (*pa).cwiseEqual(*pb).all();
        else return *pa == *pb;
      },
      a);
}

}  // namespace config_detail

/// Parses a configuration. Unknown or repeated keys and malformed values are errors naming the line.
/// Relative paths are resolved against `base_dir`.
inline ExperimentConfig parse_config(std::istream& in, const std::string& base_dir = "") {
  ExperimentConfig c;
  auto table = config_detail::fields(c);
  std::map<std::string, config_detail::FieldRef> by_key;
  for (const auto& f : table) by_key.emplace(f.key, f.ref);
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    const auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "key '" + key + "' given twice");
    try {
      config_detail::assign(it->second, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    } catch (const std::exception&) {
      throw ConfigError(where + "bad value '" + value + "' for " + key);
    }
  }
  if (!base_dir.empty()) {
    for (std::string* p : {&c.chain, &c.demo.capture, &c.demo.annotation, &c.output_dir})
      if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (std::filesystem::path(base_dir) / *p).string();
  }
  c.ilc.seed = c.seed;
  c.validate();
  return c;
}

inline void serialize_config(const ExperimentConfig& cfg, std::ostream& out) {
  ExperimentConfig c = cfg;
  out << "# seed=" << c.seed << "\n";
  for (const auto& f : config_detail::fields(c)) out << f.key << " = " << config_detail::render(f.ref) << "\n";
}

/// Field-by-field equality over every configurable field.
inline bool same_config(const ExperimentConfig& a, const ExperimentConfig& b) {
  ExperimentConfig x = a, y = b;
  const auto fa = config_detail::fields(x), fb = config_detail::fields(y);
  for (std::size_t i = 0; i < fa.size(); ++i)
    if (!config_detail::same(fa[i].ref, fb[i].ref)) return false;
  return true;
}

/// Loads a config file and checks that the files it names exist.
inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  ExperimentConfig c = parse_config(in, std::filesystem::path(path).parent_path().string());
  auto must_exist = [](const std::string& p, const char* what) {
    if (!p.empty() && !std::filesystem::exists(p)) throw ConfigError(std::string(what) + " not found: " + p);
  };
  must_exist(c.chain, "chain file");
  if (c.demo.source == DemoSource::Capture) {
    must_exist(c.demo.capture, "demo capture");
    must_exist(c.demo.annotation, "demo annotation");
  }
  return c;
}

inline ChainSpec config_chain(const ExperimentConfig& c) { return c.chain.empty() ? ChainSpec::default_arm() : load_chain(c.chain); }

/// Builds the demonstration the config asks for.
inline Demonstration config_demonstration(const ExperimentConfig& c, const ChainSpec& chain) {
  switch (c.demo.source) {
    case DemoSource::Capture: {
      const RawCapture raw = load_capture(c.demo.capture, c.demo.annotation);
      const TimingResult t = select_timing(raw);
      return build_demonstration(raw, t.t0, t.t_f, raw.t_c);
    }
    case DemoSource::Throw:
      return standard_demonstration(chain, c.resolved_plant(), derive_seed(c.seed, "demo"), c.demo.duration,
                                    c.demo.t_c_fraction);
    case DemoSource::Target:
      return target_demonstration(chain, c.learner.rope, derive_seed(c.seed, "target"), c.demo.perturbation, c.demo.t_c);
  }
  throw ConfigError("unknown demo source");
}

}  // namespace taskilc
