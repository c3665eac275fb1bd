#include "ftq/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace ftq {
namespace {

using nlohmann::json;

constexpr double kPi = 3.14159265358979323846;

constexpr ScenarioKind kAllKinds[] = {
    ScenarioKind::kHoverFail,        ScenarioKind::kRandomAttitude, ScenarioKind::kLemniscate,
    ScenarioKind::kInvertedRecovery, ScenarioKind::kCircleFail,     ScenarioKind::kForwardFlightFail,
};

[[noreturn]] void fail(const std::string& key, const std::string& what) {
  throw ConfigError("config key '" + key + "': " + what);
}

double as_double(const std::string& key, const json& v) {
  if (!v.is_number()) fail(key, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) fail(key, "expected a finite number");
  return d;
}

long long as_int(const std::string& key, const json& v) {
  if (!v.is_number_integer()) fail(key, "expected an integer");
  return v.get<long long>();
}

template <int N>
Eigen::Matrix<double, N, 1> as_vec(const std::string& key, const json& v) {
  if (!v.is_array() || v.size() != N) fail(key, "expected an array of " + std::to_string(N) + " numbers");
  Eigen::Matrix<double, N, 1> out;
  for (int i = 0; i < N; ++i) out(i) = as_double(key, v[i]);
  return out;
}

template <int N>
json vec_json(const Eigen::Matrix<double, N, 1>& v) {
  json a = json::array();
  for (int i = 0; i < N; ++i) a.push_back(v(i));
  return a;
}

Quat as_quat(const std::string& key, const json& v) {
  const Vec4 c = as_vec<4>(key, v);
  if (c.norm() < 1e-9) fail(key, "quaternion must be non-zero");
  return canonical(Quat(c(0), c(1), c(2), c(3)).normalized());
}

json quat_json(const Quat& q) { return json::array({q.w(), q.x(), q.y(), q.z()}); }

struct Entry {
  std::string key;
  std::function<void(const json&)> set;
  std::function<json()> get;
};

#define FTQ_DOUBLE(k, field) \
  {k, [&](const json& v) { field = as_double(k, v); }, [&] { return json(field); }}
#define FTQ_INT(k, field) \
  {k, [&](const json& v) { field = static_cast<int>(as_int(k, v)); }, [&] { return json(field); }}
#define FTQ_VEC(k, n, field) \
  {k, [&](const json& v) { field = as_vec<n>(k, v); }, [&] { return vec_json<n>(field); }}
#define FTQ_OPT_VEC3(k, field)                                                          \
  {k,                                                                                   \
   [&](const json& v) {                                                                 \
     if (v.is_null()) field.reset(); else field = as_vec<3>(k, v);                       \
   },                                                                                   \
   [&] { return field ? vec_json<3>(*field) : json(nullptr); }}

// Every tunable value except the per-scenario block, bound to `s`.
std::vector<Entry> bind(RunSettings& s) {
  ScenarioConfig& c = s.scenario;
  QuadParams& q = c.params;
  NmpcConfig& n = c.nmpc;
  StageWeights& w = n.weights;
  MismatchConfig& m = c.mismatch;
  return {
      FTQ_DOUBLE("quad.mass", q.mass),
      FTQ_VEC("quad.inertia", 3, q.inertia_diag),
      {"quad.rotor_positions",
       [&](const json& v) {
         if (!v.is_array() || v.size() != kNumRotors)
           fail("quad.rotor_positions", "expected 4 [x, y] pairs");
         for (int i = 0; i < kNumRotors; ++i) q.rotor_pos[i] = as_vec<2>("quad.rotor_positions", v[i]);
       },
       [&] {
         json a = json::array();
         for (const auto& r : q.rotor_pos) a.push_back(vec_json<2>(r));
         return a;
       }},
      FTQ_DOUBLE("quad.kappa_t", q.kappa_t),
      FTQ_DOUBLE("quad.thrust_min", q.thrust_min),
      FTQ_DOUBLE("quad.thrust_max", q.thrust_max),
      FTQ_DOUBLE("quad.motor_tau", q.motor_tau),
      FTQ_DOUBLE("quad.gravity", q.gravity),

      FTQ_DOUBLE("nmpc.horizon", n.horizon),
      FTQ_INT("nmpc.nodes", n.nodes),
      FTQ_INT("nmpc.integrator_substeps", n.integrator_substeps),
      FTQ_DOUBLE("nmpc.position_error_limit", n.position_error_limit),
      FTQ_INT("nmpc.qp_max_iterations", n.qp_max_iterations),
      FTQ_INT("nmpc.cold_start_iterations", n.cold_start_iterations),
      FTQ_DOUBLE("nmpc.terminal_scale", n.terminal_scale),
      FTQ_DOUBLE("nmpc.fault_yaw_rate_weight", n.fault_yaw_rate_weight),
      FTQ_VEC("nmpc.weights.position", 3, w.position),
      FTQ_DOUBLE("nmpc.weights.tilt", w.tilt),
      FTQ_DOUBLE("nmpc.weights.yaw", w.yaw),
      FTQ_VEC("nmpc.weights.velocity", 3, w.velocity),
      FTQ_VEC("nmpc.weights.omega", 3, w.omega),
      FTQ_VEC("nmpc.weights.thrust", 4, w.thrust),
      FTQ_VEC("nmpc.weights.input", 4, w.input),

      {"indi.enabled",
       [&](const json& v) {
         if (!v.is_boolean()) fail("indi.enabled", "expected true or false");
         c.indi.enabled = v.get<bool>();
       },
       [&] { return json(c.indi.enabled); }},
      FTQ_DOUBLE("indi.cutoff_hz", c.indi.cutoff_hz),

      FTQ_DOUBLE("sim.controller_rate_hz", c.controller_rate_hz),
      FTQ_DOUBLE("sim.sim_rate_hz", c.sim_rate_hz),
      {"sim.record_timing",
       [&](const json& v) {
         if (!v.is_boolean()) fail("sim.record_timing", "expected true or false");
         c.record_timing = v.get<bool>();
       },
       [&] { return json(c.record_timing); }},

      {"scenario.seed",
       [&](const json& v) {
         if (!v.is_number_unsigned()) fail("scenario.seed", "expected a non-negative integer");
         c.seed = v.get<std::uint64_t>();
       },
       [&] { return json(c.seed); }},
      FTQ_DOUBLE("scenario.altitude", c.altitude),
      FTQ_DOUBLE("scenario.lemniscate_omega", c.lemniscate_omega),
      FTQ_DOUBLE("scenario.lemniscate_hold", c.lemniscate_hold),
      FTQ_DOUBLE("scenario.circle_radius", c.circle_radius),
      FTQ_DOUBLE("scenario.circle_speed", c.circle_speed),
      FTQ_DOUBLE("scenario.forward_speed", c.forward_speed),
      FTQ_DOUBLE("scenario.flip_rate", c.flip_rate),
      FTQ_OPT_VEC3("scenario.initial_position", c.initial_position),
      FTQ_OPT_VEC3("scenario.initial_velocity", c.initial_velocity),
      {"scenario.initial_attitude",
       [&](const json& v) {
         if (v.is_null()) c.initial_attitude.reset();
         else c.initial_attitude = as_quat("scenario.initial_attitude", v);
       },
       [&] { return c.initial_attitude ? quat_json(*c.initial_attitude) : json(nullptr); }},
      FTQ_OPT_VEC3("scenario.initial_omega", c.initial_omega),

      FTQ_DOUBLE("recovery.tilt_deg", c.recovery.tilt_deg),
      FTQ_DOUBLE("recovery.planar_m", c.recovery.planar_m),
      FTQ_DOUBLE("recovery.hold_s", c.recovery.hold_s),
      FTQ_DOUBLE("recovery.divergence_m", c.recovery.divergence_m),

      FTQ_DOUBLE("mismatch.mass_error", m.mass_error),
      FTQ_VEC("mismatch.cog_offset", 2, m.cog_offset),
      FTQ_DOUBLE("mismatch.kappa_error", m.kappa_error),
      FTQ_VEC("mismatch.external_torque", 3, m.external_torque),
      FTQ_DOUBLE("mismatch.thrust_noise_std", m.thrust_noise_std),

      {"campaign.runs", [&](const json& v) { s.runs = static_cast<int>(as_int("campaign.runs", v)); },
       [&] { return json(s.runs); }},
      {"output.dir",
       [&](const json& v) {
         if (!v.is_string()) fail("output.dir", "expected a string");
         s.out_dir = v.get<std::string>();
       },
       [&] { return json(s.out_dir); }},
  };
}

#undef FTQ_DOUBLE
#undef FTQ_INT
#undef FTQ_VEC
#undef FTQ_OPT_VEC3

void flatten_into(const json& node, const std::string& prefix, json& out) {
  for (const auto& [k, v] : node.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) flatten_into(v, key, out);
    else out[key] = v;
  }
}

double lemniscate_duration(const ScenarioConfig& c) {
  return c.lemniscate_hold + 2.0 * kPi / c.lemniscate_omega;
}

std::string kind_key(ScenarioKind kind, const char* leaf) {
  return "scenario." + std::string(to_string(kind)) + "." + leaf;
}

}  // namespace

json flatten_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  json out = json::object();
  flatten_into(doc, "", out);
  return out;
}

json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return flatten_config(doc);
}

json default_config() {
  RunSettings s;
  json out = json::object();
  out["scenario.kind"] = std::string(to_string(s.scenario.kind));
  for (const auto& e : bind(s)) out[e.key] = e.get();
  for (ScenarioKind kind : kAllKinds) {
    const ScenarioConfig d = default_scenario(kind);
    // The lemniscate length follows from omega and the hold phase unless set.
    out[kind_key(kind, "duration")] =
        kind == ScenarioKind::kLemniscate ? json(nullptr) : json(d.duration);
    out[kind_key(kind, "fault_rotor")] = d.fault.failed_rotor ? json(*d.fault.failed_rotor) : json(0);
    out[kind_key(kind, "fault_time")] = d.fault.fault_time;
  }
  return out;
}

RunSettings resolve_settings(const json& flat_in, std::optional<ScenarioKind> kind) {
  const json flat = flatten_config(flat_in);
  if (!kind) {
    if (flat.contains("scenario.kind")) {
      const json& v = flat["scenario.kind"];
      if (!v.is_string()) fail("scenario.kind", "expected a string");
      kind = scenario_from_string(v.get<std::string>());
    } else {
      kind = ScenarioKind::kHoverFail;
    }
  }
  RunSettings s;
  s.scenario = default_scenario(*kind);
  std::vector<Entry> entries = bind(s);

  std::optional<double> duration;
  bool duration_given = false;
  std::optional<int> fault_rotor;
  std::optional<double> fault_time;
  for (const auto& [key, value] : flat.items()) {
    if (key == "scenario.kind") {
      if (!value.is_string()) fail(key, "expected a string");
      continue;
    }
    const auto it = std::find_if(entries.begin(), entries.end(),
                                 [&](const Entry& e) { return e.key == key; });
    if (it != entries.end()) {
      it->set(value);
      continue;
    }
    // Per-scenario block: scenario.<kind>.{duration, fault_rotor, fault_time}.
    bool matched = false;
    for (ScenarioKind k : kAllKinds) {
      const bool active = k == *kind;
      if (key == kind_key(k, "duration")) {
        matched = true;
        const std::optional<double> d =
            value.is_null() ? std::nullopt : std::optional<double>(as_double(key, value));
        if (active) {
          duration = d;
          duration_given = true;
        }
      } else if (key == kind_key(k, "fault_rotor")) {
        matched = true;
        const long long r = value.is_null() ? 0 : as_int(key, value);
        if (r < 0 || r > kNumRotors) fail(key, "expected 0 (no fault) or a rotor index 1..4");
        if (active) fault_rotor = static_cast<int>(r);
      } else if (key == kind_key(k, "fault_time")) {
        matched = true;
        const double t = as_double(key, value);
        if (active) fault_time = t;
      }
    }
    if (!matched) throw ConfigError("config: unknown key '" + key + "'");
  }

  ScenarioConfig& c = s.scenario;
  if (fault_rotor) c.fault.failed_rotor = *fault_rotor == 0 ? std::nullopt : std::optional<int>(*fault_rotor);
  if (fault_time) c.fault.fault_time = *fault_time;
  if (duration) {
    c.duration = *duration;
  } else if (c.kind == ScenarioKind::kLemniscate || duration_given) {
    if (c.kind != ScenarioKind::kLemniscate)
      fail(kind_key(c.kind, "duration"), "only the lemniscate duration may be null");
    if (!(c.lemniscate_omega > 0.0)) fail("scenario.lemniscate_omega", "must be positive");
    c.duration = lemniscate_duration(c);
  }
  if (s.runs < 1) fail("campaign.runs", "must be at least 1");
  if (s.out_dir.empty()) fail("output.dir", "must not be empty");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return s;
}

json settings_to_json(const RunSettings& settings) {
  RunSettings s = settings;
  json out = json::object();
  out["scenario.kind"] = std::string(to_string(s.scenario.kind));
  for (const auto& e : bind(s)) out[e.key] = e.get();
  const ScenarioConfig& c = s.scenario;
  out[kind_key(c.kind, "duration")] = c.duration;
  out[kind_key(c.kind, "fault_rotor")] = c.fault.failed_rotor ? *c.fault.failed_rotor : 0;
  out[kind_key(c.kind, "fault_time")] = c.fault.fault_time;
  return out;
}

}  // namespace ftq
