// taskilc: experiment driver for demonstration ingestion, learning runs and data export.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "taskilc/config.hpp"

namespace fs = std::filesystem;
using namespace taskilc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitLearning = 1;
constexpr int kExitUsage = 2;

// Writes through a temporary file so readers never see a partial artifact.
template <class Fn>
void write_atomic(const fs::path& path, Fn&& fn) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw ConfigError("cannot write " + path.string());
    fn(out);
    if (!out) throw ConfigError("write failed: " + path.string());
  }
  fs::rename(tmp, path);
}

void emit(const std::string& path, const std::function<void(std::ostream&)>& fn) {
  if (path.empty() || path == "-")
    fn(std::cout);
  else
    write_atomic(path, fn);
}

int demo_inspect(const std::string& capture, const std::string& annotation) {
  const RawCapture raw = load_capture(capture, annotation);
  const TimingResult t = select_timing(raw);
  GapStats gaps;
  const Demonstration d = build_demonstration(raw, t.t0, t.t_f, raw.t_c, &gaps);
  std::printf("seed: %llu\n", static_cast<unsigned long long>(raw.seed));
  std::printf("t0: %.4f s\nt_c: %.4f s\nt_f: %.4f s\nT: %.4f s\n", t.t0, raw.t_c, t.t_f, d.T);
  std::printf("t_f - t_c: %.3f s\n", t.t_f - raw.t_c);
  std::printf("peak hand speed: %.4f m/s at %.4f s\nhand path length: %.4f m\n", t.peak_speed, t.t_peak, t.path_length);
  std::printf("markers: %d\nmissing marker samples: %d (filled %d, longest gap %d)\n", raw.marker_count, gaps.missing,
              gaps.filled, gaps.longest_gap);
  return kExitOk;
}

int demo_synth(const std::string& config_path, const std::string& out_csv, std::string annotation) {
  const ExperimentConfig cfg = load_config(config_path);
  const ChainSpec chain = config_chain(cfg);
  const RawCapture raw = synthesize_demo(chain, reference_throw(cfg.demo.duration), demonstrator(cfg.resolved_plant()),
                                         cfg.demo.t_c_fraction, derive_seed(cfg.seed, "demo"));
  if (annotation.empty()) annotation = fs::path(out_csv).replace_extension(".json").string();
  save_capture(raw, out_csv, annotation);
  std::printf("wrote %s and %s (%zu samples, t_c = %.4f s)\n", out_csv.c_str(), annotation.c_str(), raw.times.size(),
              raw.t_c);
  return kExitOk;
}

void write_run_outputs(const fs::path& dir, const std::vector<TrialRecord>& recs, std::uint64_t seed,
                       const ExperimentConfig& cfg) {
  fs::create_directories(dir);
  std::vector<TrialRecord> logged = recs;
  for (auto& r : logged) {
    if (r.measured.rope.size() == 0) continue;
    r.rollout_file = "rollout_" + std::to_string(r.iteration) + ".jsonl";
    write_atomic(dir / r.rollout_file, [&](std::ostream& o) { write_rollout_jsonl(r.measured.rope, r.seed, o); });
  }
  write_atomic(dir / "run_log.jsonl", [&](std::ostream& o) { write_run_log(logged, seed, o); });
  write_atomic(dir / "summary.csv", [&](std::ostream& o) { write_summary_csv(logged, seed, o); });
  write_atomic(dir / "config.txt", [&](std::ostream& o) { serialize_config(cfg, o); });
  if (!recs.empty())
    write_atomic(dir / "final_command.json", [&](std::ostream& o) {
      nlohmann::json j = spline_to_json(recs.back().command);
      j["seed"] = seed;
      o << j.dump(2) << "\n";
    });
}

int ilc_run(const std::string& config_path, const std::string& out_override) {
  ExperimentConfig cfg = load_config(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  const ChainSpec chain = config_chain(cfg);
  const Demonstration demo = config_demonstration(cfg, chain);
  const PlantConfig plant = cfg.resolved_plant();
  std::printf("# seed=%llu\n", static_cast<unsigned long long>(cfg.seed));
  try {
    const IlcResult r = run_ilc(demo, chain, cfg.learner, plant, cfg.ilc);
    for (const auto& rec : r.records)
      std::printf("trial %d: cost %.5g, rms %.4g m%s\n", rec.iteration + 1, rec.cost, rec.rms, rec.success ? " (success)" : "");
    write_run_outputs(cfg.output_dir, r.records, cfg.seed, cfg);
    std::printf("trials to success: %s\n", format_trials(trials_or_sentinel(r, cfg.ilc), cfg.ilc.max_iterations).c_str());
    return r.success() ? kExitOk : kExitLearning;
  } catch (const IlcError& e) {
    write_run_outputs(cfg.output_dir, e.records, cfg.seed, cfg);
    std::fprintf(stderr, "learning aborted: %s\n", e.what());
    return kExitLearning;
  }
}

int ilc_transfer(const std::string& dir, int jobs, const std::string& out) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".cfg") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.size() < 2) throw ConfigError("transfer: need at least two .cfg files in " + dir);
  std::vector<ExperimentConfig> cfgs;
  for (const auto& f : files) cfgs.push_back(load_config(f.string()));
  const ExperimentConfig& base = cfgs.front();
  const ChainSpec chain = config_chain(base);
  const Demonstration demo = config_demonstration(base, chain);
  std::vector<PlantConfig> plants;
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    plants.push_back(cfgs[i].resolved_plant());
    labels.push_back(files[i].stem().string());
  }
  std::vector<CommandSpline> learned(plants.size());
  parallel_for(static_cast<int>(plants.size()), jobs, [&](int i) {
    learned[i] = learn(demo, chain, base.learner, plants[i], base.ilc).command;
  });
  const TransferMatrix m = transfer_experiment(learned, plants, labels, demo, chain, base.learner, base.ilc, jobs);
  emit(out, [&](std::ostream& o) { write_transfer_csv(m, base.seed, o); });
  return kExitOk;
}

int ilc_sweep(const std::string& grid_path, const std::string& config_path, int jobs, const std::string& out) {
  std::ifstream in(grid_path);
  if (!in) throw ConfigError("cannot open grid file " + grid_path);
  const auto grid = read_sweep_grid(in);
  const ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
  const ChainSpec chain = config_chain(cfg);
  const Demonstration demo = config_demonstration(cfg, chain);
  const auto rows = sensitivity_sweep(demo, chain, cfg.learner, cfg.resolved_plant(), grid, cfg.ilc, jobs);
  emit(out, [&](std::ostream& o) { write_sweep_csv(rows, cfg.ilc.max_iterations, cfg.seed, o); });
  return kExitOk;
}

int export_rollout(const std::string& log, const std::string& format, const std::string& out) {
  std::ifstream in(log);
  if (!in) throw ConfigError("cannot open rollout file " + log);
  std::string first;
  std::getline(in, first);
  in.seekg(0);
  const RopeTrajectory r = !first.empty() && first[0] == '{' ? read_rollout_jsonl(in) : read_rollout_csv(in);
  emit(out, [&](std::ostream& o) {
    if (format == "jsonl")
      write_rollout_jsonl(r.rollout, r.seed, o);
    else
      write_rollout_csv(r.rollout, r.seed, o);
  });
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-level iterative learning for dynamic rope manipulation"};
  app.require_subcommand(1);

  auto* demo = app.add_subcommand("demo", "demonstration captures")->require_subcommand(1);
  std::string capture, annotation, config, out, synth_annotation;
  auto* inspect = demo->add_subcommand("inspect", "timing selection report for a capture");
  inspect->add_option("capture", capture, "capture CSV")->required();
  inspect->add_option("annotation", annotation, "annotation JSON")->required();
  auto* synth = demo->add_subcommand("synth", "synthesize a capture from a config's plant");
  synth->add_option("--config", config, "experiment config")->required();
  synth->add_option("--out", out, "capture CSV to write")->required();
  synth->add_option("--annotation", synth_annotation, "annotation JSON (default: next to the CSV)");

  auto* ilc = app.add_subcommand("ilc", "learning runs")->require_subcommand(1);
  int jobs = 1;
  std::string configs_dir, grid;
  auto* run = ilc->add_subcommand("run", "learn one command");
  run->add_option("--config", config, "experiment config")->required();
  run->add_option("--out", out, "output directory (overrides paths.output_dir)");
  auto* transfer = ilc->add_subcommand("transfer", "transfer matrix across plants");
  transfer->add_option("--configs", configs_dir, "directory of .cfg files, one per plant")->required();
  transfer->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);
  transfer->add_option("--out", out, "matrix CSV (default: stdout)");
  auto* sweep = ilc->add_subcommand("sweep", "learner rope-parameter sweep");
  sweep->add_option("--grid", grid, "CSV of k,m_e rows")->required();
  sweep->add_option("--config", config, "experiment config (default: built-in)");
  sweep->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);
  sweep->add_option("--out", out, "table CSV (default: stdout)");

  auto* exp = app.add_subcommand("export", "data export")->require_subcommand(1);
  std::string log, format = "jsonl";
  auto* rollout = exp->add_subcommand("rollout", "rope trajectory as JSON lines or CSV");
  rollout->add_option("log", log, "rollout file (jsonl or csv)")->required();
  rollout->add_option("--format", format, "jsonl or csv")->check(CLI::IsMember({"jsonl", "csv"}));
  rollout->add_option("--out", out, "output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*inspect) return demo_inspect(capture, annotation);
    if (*synth) return demo_synth(config, out, synth_annotation);
    if (*run) return ilc_run(config, out);
    if (*transfer) return ilc_transfer(configs_dir, jobs, out);
    if (*sweep) return ilc_sweep(grid, config, jobs, out);
    if (*rollout) return export_rollout(log, format, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const TimingError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
