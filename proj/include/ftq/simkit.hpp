#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ftq/indi.hpp"
#include "ftq/nmpc.hpp"
#include "ftq/quadmodel.hpp"

namespace ftq {

enum class ScenarioKind {
  kHoverFail,
  kRandomAttitude,
  kLemniscate,
  kInvertedRecovery,
  kCircleFail,
  kForwardFlightFail,
};

std::string_view to_string(ScenarioKind kind);
/// Throws std::invalid_argument for an unknown name.
ScenarioKind scenario_from_string(std::string_view name);

/// Plant-side perturbations; the controller keeps the nominal model.
struct MismatchConfig {
  double mass_error = 0.0;          // fraction
  Vec2 cog_offset = Vec2::Zero();   // m, body frame
  double kappa_error = 0.0;         // fraction
  Vec3 external_torque = Vec3::Zero();  // N m, body frame, constant
  double thrust_noise_std = 0.0;    // N, on INDI thrust measurements

  /// Plant parameters derived from the controller's nominal ones.
  QuadParams apply(const QuadParams& nominal) const;
};

/// Controller settings used by the simulator. The weights are tuned for
/// failure recovery (stiffer position loop than the StageWeights defaults).
struct NmpcConfig {
  double horizon = 1.0;
  int nodes = 20;
  int integrator_substeps = 2;
  double position_error_limit = 2.0;
  int qp_max_iterations = 50;
  int cold_start_iterations = 10;
  double terminal_scale = 5.0;
  double fault_yaw_rate_weight = 0.05;
  StageWeights weights = tuned_weights();

  static StageWeights tuned_weights() {
    StageWeights w;
    w.position = Vec3::Constant(200.0);
    w.velocity = Vec3::Constant(5.0);
    return w;
  }
};

struct IndiConfig {
  bool enabled = false;
  double cutoff_hz = 12.0;
};

/// Recovered: tilt and planar error below thresholds continuously for `hold`.
struct RecoveryCriteria {
  double tilt_deg = 25.0;
  double planar_m = 0.3;
  double hold_s = 0.5;
  /// Planar error beyond which a tracking run counts as diverged.
  double divergence_m = 5.0;
};

struct ScenarioConfig {
  ScenarioKind kind = ScenarioKind::kHoverFail;
  double duration = 8.0;
  FaultStatus fault = FaultStatus::rotor(1, 3.0);
  std::uint64_t seed = 0;
  double controller_rate_hz = 150.0;
  double sim_rate_hz = 1050.0;
  MismatchConfig mismatch;
  QuadParams params;
  NmpcConfig nmpc;
  IndiConfig indi;
  RecoveryCriteria recovery;

  double altitude = 2.0;
  double lemniscate_omega = 0.3535;
  /// Hover time at the lemniscate start point before the trajectory clock starts.
  double lemniscate_hold = 3.0;
  double circle_radius = 4.0;
  double circle_speed = 7.5;
  double forward_speed = 5.0;
  /// Initial body rate about x for the inverted scenario.
  double flip_rate = 0.0;

  std::optional<Vec3> initial_position;
  std::optional<Vec3> initial_velocity;
  std::optional<Quat> initial_attitude;
  std::optional<Vec3> initial_omega;

  /// Record wall-clock solver latency in logs (makes outputs non-reproducible).
  bool record_timing = false;

  /// Throws std::invalid_argument when the configuration is inconsistent.
  void validate() const;
  int substeps_per_control() const;
  bool is_recovery() const;
};

/// Default configuration for a scenario kind.
ScenarioConfig default_scenario(ScenarioKind kind);

struct LogRow {
  double time = 0.0;
  State state;
  Vec4 command = Vec4::Zero();
  Vec3 ref_p = Vec3::Zero();
  double kkt = 0.0;
  double solve_ms = 0.0;
  bool fault_active = false;
};

struct TrajectoryLog {
  std::vector<LogRow> rows;
  int solver_guard_trips = 0;
  bool diverged = false;
};

struct Metrics {
  double max_alt_drop = 0.0;
  double max_xy_offset = 0.0;
  /// Seconds after the fault (or start); empty when never recovered.
  std::optional<double> recovery_time;
  bool success = false;
  double rms_tracking_error = 0.0;
  double mean_solver_latency = 0.0;
};

struct ScenarioResult {
  ScenarioConfig config;
  TrajectoryLog log;
  Metrics metrics;
};

ReferencePoint lemniscate_reference(double t, double omega, double altitude);
ReferencePoint circle_reference(double t, double radius, double speed, double altitude);
ReferencePoint forward_reference(double t, double speed, double altitude = 0.0);

/// Initial plant state of a scenario, including seeded random orientation.
State initial_state(const ScenarioConfig& config);

ScenarioResult run_scenario(const ScenarioConfig& config);

/// Start of the evaluation window: the fault time, or the trajectory start for
/// tracking runs, or 0 without a fault.
double metrics_epoch(const ScenarioConfig& config);

Metrics compute_metrics(const TrajectoryLog& log, const ScenarioConfig& config);

struct Histogram {
  std::vector<double> edges;
  std::vector<int> counts;  // edges.size() - 1 bins; the last bin also takes overflow
};

Histogram make_histogram(const std::vector<double>& values, std::vector<double> edges);

struct MonteCarloSummary {
  int runs = 0;
  std::uint64_t base_seed = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<Metrics> metrics;
  double success_rate = 0.0;
  double recovered_within_1s = 0.0;
  double recovered_within_2_5s = 0.0;
  double xy_below_0_8 = 0.0;
  double drop_below_1_0 = 0.0;
  Histogram xy_histogram;
  Histogram drop_histogram;
};

/// n independent random-attitude runs seeded base_seed + i. The base config's
/// kind is forced to random_attitude. Runs execute on up to `threads` workers
/// (0 = FTQ_THREADS or hardware concurrency); results do not depend on it.
/// `on_run` is called from worker threads.
MonteCarloSummary monte_carlo_recovery(
    int n, std::uint64_t base_seed, const ScenarioConfig& base = default_scenario(ScenarioKind::kRandomAttitude),
    unsigned threads = 0, std::vector<ScenarioResult>* results = nullptr);

/// Worker count from FTQ_THREADS, else hardware concurrency (at least 1).
unsigned default_thread_count();

/// Percentile with linear interpolation, p in [0, 100].
double percentile(std::vector<double> values, double p);

}  // namespace ftq
