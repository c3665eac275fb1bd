#include "ftq/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <ostream>

#include "ftq/config.hpp"
#include "ftq/io.hpp"

namespace ftq::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Flags {
  std::string scenario;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> runs;
  std::optional<int> fault_rotor;
  std::optional<double> fault_time;
  std::optional<double> omega;
  std::optional<std::string> indi;
  std::optional<std::string> out_dir;
  std::optional<double> duration;
};

struct OutputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json make_manifest(const RunSettings& settings, const std::vector<std::string>& outputs) {
  json config = settings_to_json(settings);
  config.erase("output.dir");  // outputs are listed relative to it
  return {{"artifact", "ftq"},
          {"version", kVersion},
          {"scenario", std::string(to_string(settings.scenario.kind))},
          {"seed", settings.scenario.seed},
          {"runs", settings.runs},
          {"config", std::move(config)},
          {"outputs", outputs}};
}

void write_output(const json& doc, const fs::path& path) {
  try {
    write_json(doc, path);
  } catch (const std::runtime_error& e) {
    throw OutputError(e.what());
  }
}

std::string run_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "run_%03d.csv", i);
  return buf;
}

int single_run(const RunSettings& settings, const fs::path& dir, std::ostream& out) {
  write_output(make_manifest(settings, {"trajectory.csv", "metrics.json"}), dir / "manifest.json");
  const auto t0 = std::chrono::steady_clock::now();
  const ScenarioResult result = run_scenario(settings.scenario);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  try {
    export_csv(result.log, dir / "trajectory.csv");
  } catch (const std::runtime_error& e) {
    throw OutputError(e.what());
  }
  json metrics = metrics_to_json(result.metrics);
  metrics["scenario"] = std::string(to_string(settings.scenario.kind));
  metrics["solver_guard_trips"] = result.log.solver_guard_trips;
  metrics["diverged"] = result.log.diverged;
  write_output(metrics, dir / "metrics.json");
  if (settings.scenario.record_timing) {
    json manifest = make_manifest(settings, {"trajectory.csv", "metrics.json"});
    manifest["timings"] = {{"wall_s", wall}};
    write_output(manifest, dir / "manifest.json");
  }

  const Metrics& m = result.metrics;
  out << to_string(settings.scenario.kind) << ": " << (m.success ? "success" : "FAILED")
      << " max_alt_drop=" << m.max_alt_drop << " max_xy_offset=" << m.max_xy_offset
      << " recovery_time=";
  if (m.recovery_time) out << *m.recovery_time; else out << "none";
  out << " rms=" << m.rms_tracking_error << '\n';
  return m.success ? kOk : kRunFailed;
}

int campaign(const RunSettings& settings, const fs::path& dir, std::ostream& out) {
  std::vector<std::string> outputs;
  for (int i = 0; i < settings.runs; ++i) outputs.push_back("runs/" + run_name(i));
  outputs.push_back("summary.json");
  write_output(make_manifest(settings, outputs), dir / "manifest.json");

  std::error_code ec;
  fs::create_directories(dir / "runs", ec);
  if (ec) throw OutputError("cannot create " + (dir / "runs").string() + ": " + ec.message());

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<ScenarioResult> results;
  const MonteCarloSummary summary = monte_carlo_recovery(
      settings.runs, settings.scenario.seed, settings.scenario, 0, &results);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  for (int i = 0; i < settings.runs; ++i) {
    try {
      export_csv(results[i].log, dir / "runs" / run_name(i));
    } catch (const std::runtime_error& e) {
      throw OutputError(e.what());
    }
  }
  write_output(summary_to_json(summary), dir / "summary.json");
  if (settings.scenario.record_timing) {
    json manifest = make_manifest(settings, outputs);
    manifest["timings"] = {{"wall_s", wall}};
    write_output(manifest, dir / "manifest.json");
  }

  out << "random_attitude x" << summary.runs << ": success_rate=" << summary.success_rate
      << " within_1s=" << summary.recovered_within_1s
      << " within_2.5s=" << summary.recovered_within_2_5s
      << " xy<0.8=" << summary.xy_below_0_8 << " drop<1.0=" << summary.drop_below_1_0 << '\n';
  return summary.success_rate == 1.0 ? kOk : kRunFailed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fault-tolerant quadrotor NMPC/INDI simulator", "ftq"};
  Flags f;
  app.add_option("--scenario", f.scenario,
                 "hover_fail | random_attitude | lemniscate | inverted_recovery | circle_fail | "
                 "forward_flight_fail");
  app.add_option("--config", f.config, "JSON config file (flat section.key addressing)");
  app.add_option("--seed", f.seed, "Scenario seed; Monte-Carlo base seed");
  app.add_option("--runs", f.runs, "Monte-Carlo run count (random_attitude only)");
  app.add_option("--fault-rotor", f.fault_rotor, "Failed rotor 1..4, 0 for none");
  app.add_option("--fault-time", f.fault_time, "Failure time in seconds");
  app.add_option("--omega", f.omega, "Lemniscate angular rate in rad/s");
  app.add_option("--indi", f.indi, "INDI inner loop")->check(CLI::IsMember({"on", "off"}));
  app.add_option("--out-dir", f.out_dir, "Output directory");
  app.add_option("--duration", f.duration, "Simulated duration in seconds");
  app.set_version_flag("--version", kVersion);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << '\n';
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  RunSettings settings;
  try {
    json flat = f.config.empty() ? json::object() : load_config_file(f.config);
    std::optional<ScenarioKind> kind;
    if (!f.scenario.empty()) {
      kind = scenario_from_string(f.scenario);
    } else if (flat.contains("scenario.kind") && flat["scenario.kind"].is_string()) {
      kind = scenario_from_string(flat["scenario.kind"].get<std::string>());
    } else {
      kind = ScenarioKind::kHoverFail;
    }
    const std::string block = "scenario." + std::string(to_string(*kind)) + ".";
    if (f.seed) flat["scenario.seed"] = *f.seed;
    if (f.runs) flat["campaign.runs"] = *f.runs;
    if (f.fault_rotor) flat[block + "fault_rotor"] = *f.fault_rotor;
    if (f.fault_time) flat[block + "fault_time"] = *f.fault_time;
    if (f.omega) flat["scenario.lemniscate_omega"] = *f.omega;
    if (f.indi) flat["indi.enabled"] = *f.indi == "on";
    if (f.out_dir) flat["output.dir"] = *f.out_dir;
    if (f.duration) flat[block + "duration"] = *f.duration;
    settings = resolve_settings(flat, kind);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kMalformedConfig;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUnknownScenario;
  }
  if (settings.runs > 1 && settings.scenario.kind != ScenarioKind::kRandomAttitude) {
    err << "error: --runs > 1 is only supported for random_attitude\n";
    return kUsage;
  }

  const fs::path dir = settings.out_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    err << "error: cannot create output directory " << dir << (ec ? ": " + ec.message() : "")
        << '\n';
    return kUnwritableOutput;
  }

  try {
    const bool is_campaign = settings.scenario.kind == ScenarioKind::kRandomAttitude &&
                             settings.runs > 1;
    return is_campaign ? campaign(settings, dir, out) : single_run(settings, dir, out);
  } catch (const OutputError& e) {
    err << "error: " << e.what() << '\n';
    return kUnwritableOutput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInternalError;
  }
}

}  // namespace ftq::cli
