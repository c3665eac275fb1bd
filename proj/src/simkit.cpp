#include "ftq/simkit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>

namespace ftq {
namespace {

constexpr double kPi = 3.14159265358979323846;

struct KindName {
  ScenarioKind kind;
  std::string_view name;
};

constexpr KindName kKindNames[] = {
    {ScenarioKind::kHoverFail, "hover_fail"},
    {ScenarioKind::kRandomAttitude, "random_attitude"},
    {ScenarioKind::kLemniscate, "lemniscate"},
    {ScenarioKind::kInvertedRecovery, "inverted_recovery"},
    {ScenarioKind::kCircleFail, "circle_fail"},
    {ScenarioKind::kForwardFlightFail, "forward_flight_fail"},
};

bool finite_state(const State& s) {
  return s.p.allFinite() && s.v.allFinite() && s.q.coeffs().allFinite() &&
         s.omega.allFinite() && s.thrust.allFinite();
}

ReferenceSource initial_source(const ScenarioConfig& config) {
  const double h = config.altitude;
  switch (config.kind) {
    case ScenarioKind::kLemniscate: {
      const double omega = config.lemniscate_omega;
      const double hold = config.lemniscate_hold;
      return Trajectory{[omega, hold, h](double t) {
                          if (t < hold) {
                            ReferencePoint r;
                            r.p = Vec3(0.0, 0.0, h);
                            return r;
                          }
                          return lemniscate_reference(t - hold, omega, h);
                        },
                        0.0};
    }
    case ScenarioKind::kCircleFail: {
      const double radius = config.circle_radius;
      const double speed = config.circle_speed;
      return Trajectory{
          [radius, speed, h](double t) { return circle_reference(t, radius, speed, h); }, 0.0};
    }
    case ScenarioKind::kForwardFlightFail: {
      const double speed = config.forward_speed;
      return Trajectory{[speed, h](double t) { return forward_reference(t, speed, h); }, 0.0};
    }
    default:
      return HoverTarget{initial_state(config).p};
  }
}

}  // namespace

std::string_view to_string(ScenarioKind kind) {
  for (const auto& kn : kKindNames)
    if (kn.kind == kind) return kn.name;
  return "unknown";
}

ScenarioKind scenario_from_string(std::string_view name) {
  for (const auto& kn : kKindNames)
    if (kn.name == name) return kn.kind;
  throw std::invalid_argument("unknown scenario '" + std::string(name) + "'");
}

QuadParams MismatchConfig::apply(const QuadParams& nominal) const {
  QuadParams p = nominal;
  p.mass *= 1.0 + mass_error;
  p.kappa_t *= 1.0 + kappa_error;
  // Rotor arms are measured from the (displaced) centre of gravity.
  for (auto& r : p.rotor_pos) r -= cog_offset;
  return p;
}

void ScenarioConfig::validate() const {
  params.validate();
  if (!(duration > 0.0)) throw std::invalid_argument("scenario: duration must be positive");
  if (!(controller_rate_hz > 0.0) || !(sim_rate_hz > 0.0))
    throw std::invalid_argument("scenario: rates must be positive");
  const double ratio = sim_rate_hz / controller_rate_hz;
  if (ratio < 1.0 || std::abs(ratio - std::round(ratio)) > 1e-9)
    throw std::invalid_argument("scenario: sim rate must be an integer multiple of the controller rate");
  if (fault.failed_rotor) {
    if (*fault.failed_rotor < 1 || *fault.failed_rotor > kNumRotors)
      throw std::invalid_argument("scenario: fault rotor must be in 1..4");
    if (!(duration > fault.fault_time))
      throw std::invalid_argument("scenario: duration must exceed the fault time");
  }
  if (kind == ScenarioKind::kLemniscate && !(lemniscate_omega > 0.0))
    throw std::invalid_argument("scenario: lemniscate omega must be positive");
  if (kind == ScenarioKind::kCircleFail && (!(circle_radius > 0.0) || circle_speed < 0.0))
    throw std::invalid_argument("scenario: circle needs radius > 0 and speed >= 0");
  if (!(indi.cutoff_hz > 0.0)) throw std::invalid_argument("scenario: INDI cutoff must be positive");
  if (mismatch.thrust_noise_std < 0.0)
    throw std::invalid_argument("scenario: thrust noise must be non-negative");
}

int ScenarioConfig::substeps_per_control() const {
  return static_cast<int>(std::lround(sim_rate_hz / controller_rate_hz));
}

bool ScenarioConfig::is_recovery() const { return kind != ScenarioKind::kLemniscate; }

ScenarioConfig default_scenario(ScenarioKind kind) {
  ScenarioConfig c;
  c.kind = kind;
  switch (kind) {
    case ScenarioKind::kHoverFail:
      c.duration = 8.0;
      c.fault = FaultStatus::rotor(1, 3.0);
      break;
    case ScenarioKind::kRandomAttitude:
      c.duration = 4.0;
      c.fault = FaultStatus::rotor(1, 0.0);
      break;
    case ScenarioKind::kLemniscate:
      c.fault = FaultStatus::rotor(1, 1.0);
      c.duration = c.lemniscate_hold + 2.0 * kPi / c.lemniscate_omega;
      break;
    case ScenarioKind::kInvertedRecovery:
      c.duration = 5.0;
      c.fault = FaultStatus::rotor(1, 0.0);
      break;
    case ScenarioKind::kCircleFail:
      c.duration = 10.0;
      c.fault = FaultStatus::rotor(1, 3.0);
      break;
    case ScenarioKind::kForwardFlightFail:
      c.duration = 8.0;
      c.fault = FaultStatus::rotor(1, 2.0);
      break;
  }
  return c;
}

ReferencePoint lemniscate_reference(double t, double omega, double altitude) {
  if (!(omega > 0.0)) throw std::invalid_argument("lemniscate_reference: omega must be positive");
  ReferencePoint r;
  r.p = Vec3(4.0 * std::sin(omega * t), 2.0 * std::sin(2.0 * omega * t), altitude);
  r.v = Vec3(4.0 * omega * std::cos(omega * t), 4.0 * omega * std::cos(2.0 * omega * t), 0.0);
  return r;
}

ReferencePoint circle_reference(double t, double radius, double speed, double altitude) {
  if (!(radius > 0.0) || speed < 0.0)
    throw std::invalid_argument("circle_reference: need radius > 0 and speed >= 0");
  const double phase = speed * t / radius;
  ReferencePoint r;
  r.p = Vec3(radius * std::cos(phase), radius * std::sin(phase), altitude);
  r.v = Vec3(-speed * std::sin(phase), speed * std::cos(phase), 0.0);
  return r;
}

ReferencePoint forward_reference(double t, double speed, double altitude) {
  if (speed < 0.0) throw std::invalid_argument("forward_reference: speed must be >= 0");
  ReferencePoint r;
  r.p = Vec3(speed * t, 0.0, altitude);
  r.v = Vec3(speed, 0.0, 0.0);
  return r;
}

State initial_state(const ScenarioConfig& config) {
  State s = State::hover(config.params, Vec3(0.0, 0.0, config.altitude));
  switch (config.kind) {
    case ScenarioKind::kRandomAttitude:
      // Seed 0 is the already-level special case.
      s.q = config.seed == 0 ? Quat::Identity() : random_unit_quaternion(config.seed);
      break;
    case ScenarioKind::kInvertedRecovery:
      s.q = Quat(0.0, 1.0, 0.0, 0.0);
      s.omega = Vec3(config.flip_rate, 0.0, 0.0);
      break;
    case ScenarioKind::kCircleFail: {
      const ReferencePoint r =
          circle_reference(0.0, config.circle_radius, config.circle_speed, config.altitude);
      s.p = r.p;
      s.v = r.v;
      break;
    }
    case ScenarioKind::kForwardFlightFail:
      s.v = Vec3(config.forward_speed, 0.0, 0.0);
      break;
    default:
      break;
  }
  if (config.initial_position) s.p = *config.initial_position;
  if (config.initial_velocity) s.v = *config.initial_velocity;
  if (config.initial_attitude) s.q = canonical(*config.initial_attitude);
  if (config.initial_omega) s.omega = *config.initial_omega;
  return s;
}

ScenarioResult run_scenario(const ScenarioConfig& config) {
  config.validate();
  ScenarioResult result;
  result.config = config;

  const QuadParams plant = config.mismatch.apply(config.params);
  const NmpcConfig& nc = config.nmpc;
  OcpProblem problem = OcpProblem::make(
      config.params, CostWeights::from_running(nc.weights, nc.terminal_scale), nc.horizon, nc.nodes);
  problem.integrator_substeps = nc.integrator_substeps;
  problem.position_error_limit = nc.position_error_limit;
  problem.qp.max_iterations = nc.qp_max_iterations;
  problem.fault_yaw_rate_weight = nc.fault_yaw_rate_weight;
  problem.cold_start_iterations = nc.cold_start_iterations;
  NmpcController controller(problem);

  const IndiAllocator allocator(config.params);
  FilterState filter;
  filter.cutoff_hz = config.indi.cutoff_hz;
  std::mt19937_64 noise_rng(config.seed * 0x9E3779B97F4A7C15ULL + 1);
  std::normal_distribution<double> noise(0.0, 1.0);

  const double dt_ctrl = 1.0 / config.controller_rate_hz;
  const int substeps = config.substeps_per_control();
  const double dt_sim = dt_ctrl / substeps;
  const long steps = std::lround(std::floor(config.duration * config.controller_rate_hz + 1e-9));

  State x = initial_state(config);
  Vec4 model_thrust = x.thrust;
  const double lag_gain = 1.0 - std::exp(-dt_ctrl / config.params.motor_tau);
  ReferenceSource source = initial_source(config);
  bool fault_engaged = false;
  TrajectoryLog& log = result.log;
  log.rows.reserve(static_cast<std::size_t>(steps) + 1);

  for (long k = 0; k <= steps; ++k) {
    const double t = static_cast<double>(k) / config.controller_rate_hz;
    const bool fault_active = config.fault.active_at(t);
    if (fault_active && !fault_engaged) {
      controller.set_fault(config.fault);
      fault_engaged = true;
      if (config.is_recovery()) source = HoverTarget{x.p};
    }
    controller.set_references(build_reference(source, t, controller.problem()));
    // With INDI the NMPC sees the nominal motor response to its own commands;
    // the thrust increments INDI adds to reject disturbances stay out of its model.
    State x_ctrl = x;
    if (config.indi.enabled) x_ctrl.thrust = model_thrust;
    const OcpSolution& sol = controller.step(x_ctrl, k == 0 ? 0.0 : dt_ctrl);
    if (sol.status == SolveStatus::kInfeasibleGuard) ++log.solver_guard_trips;

    const OcpProblem& active = controller.problem();
    Vec4 u = controller.command();
    model_thrust += (u - model_thrust) * lag_gain;
    if (config.indi.enabled) {
      Vec4 t_meas = x.thrust;
      if (config.mismatch.thrust_noise_std > 0.0)
        for (int i = 0; i < kNumRotors; ++i)
          t_meas(i) += config.mismatch.thrust_noise_std * noise(noise_rng);
      filter = lowpass_update(filter, x.omega, estimate_torque(t_meas, config.params), dt_ctrl);
      u = allocator.allocate(u, x.omega, filter, active.fault, active.input_lower,
                             active.input_upper);
    }
    u = u.cwiseMax(active.input_lower).cwiseMin(active.input_upper);

    LogRow row;
    row.time = t;
    row.state = x;
    row.command = u;
    row.ref_p = active.references.front().p;
    row.kkt = sol.kkt_residual;
    row.solve_ms = config.record_timing ? sol.solve_time * 1e3 : 0.0;
    row.fault_active = fault_active;
    log.rows.push_back(row);
    if (k == steps) break;

    for (int s = 0; s < substeps; ++s) {
      Vec4 u_plant = u;
      if (config.fault.active_at(t + s * dt_sim)) u_plant(config.fault.slot()) = 0.0;
      const Vec3 disturbance = config.mismatch.external_torque;
      x = integrate_rk4(x, u_plant, plant, dt_sim, disturbance);
    }
    if (!finite_state(x) || (x.p - row.ref_p).norm() > 1e3) {
      log.diverged = true;
      break;
    }
  }

  result.metrics = compute_metrics(log, config);
  return result;
}

double metrics_epoch(const ScenarioConfig& config) {
  double epoch = config.fault.failed_rotor ? config.fault.fault_time : 0.0;
  if (config.kind == ScenarioKind::kLemniscate) epoch = std::max(epoch, config.lemniscate_hold);
  return epoch;
}

Metrics compute_metrics(const TrajectoryLog& log, const ScenarioConfig& config) {
  const double epoch = metrics_epoch(config);
  if (log.rows.empty() || log.rows.back().time < epoch || log.rows.front().time > epoch + 1e-9)
    throw std::invalid_argument("compute_metrics: log does not cover the evaluation epoch");

  const auto first = std::find_if(log.rows.begin(), log.rows.end(),
                                  [&](const LogRow& r) { return r.time >= epoch - 1e-12; });
  const double z0 = first->state.p.z();
  const double tilt_limit = config.recovery.tilt_deg * kPi / 180.0;

  Metrics m;
  double sq_sum = 0.0;
  double latency_sum = 0.0;
  std::size_t count = 0;
  std::optional<double> candidate;  // start of the current window satisfying the criteria
  for (auto it = first; it != log.rows.end(); ++it) {
    const double planar = (it->state.p - it->ref_p).head<2>().norm();
    m.max_alt_drop = std::max(m.max_alt_drop, z0 - it->state.p.z());
    m.max_xy_offset = std::max(m.max_xy_offset, planar);
    sq_sum += planar * planar;
    latency_sum += it->solve_ms * 1e-3;
    ++count;

    const bool ok = tilt_angle(it->state.q) < tilt_limit && planar < config.recovery.planar_m;
    if (!ok) {
      candidate.reset();
    } else if (!candidate) {
      candidate = it->time;
    }
    if (candidate && !m.recovery_time && it->time - *candidate >= config.recovery.hold_s - 1e-9)
      m.recovery_time = *candidate - epoch;
  }
  m.rms_tracking_error = std::sqrt(sq_sum / static_cast<double>(count));
  m.mean_solver_latency = latency_sum / static_cast<double>(count);
  if (config.kind == ScenarioKind::kLemniscate) {
    m.success = !log.diverged && m.max_xy_offset < config.recovery.divergence_m;
  } else {
    m.success = !log.diverged && m.recovery_time.has_value();
  }
  return m;
}

Histogram make_histogram(const std::vector<double>& values, std::vector<double> edges) {
  if (edges.size() < 2) throw std::invalid_argument("make_histogram: need at least two edges");
  Histogram h;
  h.edges = std::move(edges);
  h.counts.assign(h.edges.size() - 1, 0);
  for (double v : values) {
    const auto upper = std::upper_bound(h.edges.begin(), h.edges.end(), v);
    long bin = std::distance(h.edges.begin(), upper) - 1;
    bin = std::clamp<long>(bin, 0, static_cast<long>(h.counts.size()) - 1);
    ++h.counts[bin];
  }
  return h;
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - lo) * (values[hi] - values[lo]);
}

unsigned default_thread_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FTQ_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap > 0) n = std::min(n, static_cast<unsigned>(cap));
  }
  return n;
}

MonteCarloSummary monte_carlo_recovery(int n, std::uint64_t base_seed, const ScenarioConfig& base,
                                       unsigned threads, std::vector<ScenarioResult>* results) {
  if (n < 1) throw std::invalid_argument("monte_carlo_recovery: need at least one run");
  ScenarioConfig cfg = base;
  cfg.kind = ScenarioKind::kRandomAttitude;
  cfg.validate();

  std::vector<ScenarioResult> runs(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (int i = next++; i < n; i = next++) {
      ScenarioConfig c = cfg;
      c.seed = base_seed + static_cast<std::uint64_t>(i);
      runs[i] = run_scenario(c);
    }
  };
  const unsigned workers = std::min<unsigned>(threads == 0 ? default_thread_count() : threads,
                                              static_cast<unsigned>(n));
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  MonteCarloSummary s;
  s.runs = n;
  s.base_seed = base_seed;
  std::vector<double> xy, drop;
  int ok = 0, within_1 = 0, within_2_5 = 0, xy_ok = 0, drop_ok = 0;
  for (const auto& r : runs) {
    s.seeds.push_back(r.config.seed);
    s.metrics.push_back(r.metrics);
    const Metrics& m = r.metrics;
    ok += m.success;
    within_1 += m.recovery_time && *m.recovery_time <= 1.0;
    within_2_5 += m.recovery_time && *m.recovery_time <= 2.5;
    xy_ok += m.max_xy_offset < 0.8;
    drop_ok += m.max_alt_drop < 1.0;
    xy.push_back(m.max_xy_offset);
    drop.push_back(m.max_alt_drop);
  }
  const double dn = n;
  s.success_rate = ok / dn;
  s.recovered_within_1s = within_1 / dn;
  s.recovered_within_2_5s = within_2_5 / dn;
  s.xy_below_0_8 = xy_ok / dn;
  s.drop_below_1_0 = drop_ok / dn;
  std::vector<double> xy_edges, drop_edges;
  for (int i = 0; i <= 16; ++i) xy_edges.push_back(0.1 * i);
  for (int i = 0; i <= 20; ++i) drop_edges.push_back(0.1 * i);
  s.xy_histogram = make_histogram(xy, xy_edges);
  s.drop_histogram = make_histogram(drop, drop_edges);
  if (results) *results = std::move(runs);
  return s;
}

}  // namespace ftq
