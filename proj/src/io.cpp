#include "ftq/io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <system_error>

namespace ftq {
namespace {

using nlohmann::json;

constexpr std::size_t kNumColumns = 28;

double parse_double(const std::string& field, std::size_t line) {
  double v = 0.0;
  const char* first = field.data();
  const char* last = first + field.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw std::runtime_error("csv line " + std::to_string(line) + ": bad number '" + field + "'");
  return v;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json histogram_json(const Histogram& h) { return {{"edges", h.edges}, {"counts", h.counts}}; }

json percentiles_json(const std::vector<double>& values) {
  json out = json::object();
  for (int p : {5, 25, 50, 75, 90, 95, 99, 100})
    out["p" + std::to_string(p)] = percentile(values, p);
  return out;
}

}  // namespace

const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> columns = {
      "time_s",  "p_x",     "p_y",     "p_z", "v_x", "v_y", "v_z", "q_w",    "q_x",    "q_y",
      "q_z",     "omega_x", "omega_y", "omega_z", "t_1", "t_2", "t_3", "t_4", "u_1", "u_2",
      "u_3",     "u_4",     "ref_px",  "ref_py",  "ref_pz", "kkt", "solve_ms", "fault_active"};
  return columns;
}

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

void write_csv(const TrajectoryLog& log, std::ostream& out) {
  const auto& cols = csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const LogRow& r : log.rows) {
    const StateVector x = r.state.to_vector();
    out << format_double(r.time);
    for (int i = 0; i < kStateDim; ++i) out << ',' << format_double(x(i));
    for (int i = 0; i < kInputDim; ++i) out << ',' << format_double(r.command(i));
    for (int i = 0; i < 3; ++i) out << ',' << format_double(r.ref_p(i));
    out << ',' << format_double(r.kkt) << ',' << format_double(r.solve_ms) << ','
        << (r.fault_active ? 1 : 0) << '\n';
  }
}

void export_csv(const TrajectoryLog& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_csv(log, out);
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

TrajectoryLog read_csv(std::istream& in) {
  static_assert(kNumColumns == 1 + kStateDim + kInputDim + 3 + 3);
  if (csv_columns().size() != kNumColumns) throw std::logic_error("csv: column table mismatch");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("csv: missing header");
  {
    std::string expected;
    for (const auto& c : csv_columns()) expected += (expected.empty() ? "" : ",") + c;
    if (line != expected) throw std::runtime_error("csv: unexpected header");
  }
  TrajectoryLog log;
  std::size_t line_no = 1;
  std::vector<std::string> fields;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    fields.clear();
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != csv_columns().size())
      throw std::runtime_error("csv line " + std::to_string(line_no) + ": expected " +
                               std::to_string(csv_columns().size()) + " fields");
    LogRow r;
    std::size_t c = 0;
    r.time = parse_double(fields[c++], line_no);
    StateVector x;
    for (int i = 0; i < kStateDim; ++i) x(i) = parse_double(fields[c++], line_no);
    r.state = State::from_vector(x);
    for (int i = 0; i < kInputDim; ++i) r.command(i) = parse_double(fields[c++], line_no);
    for (int i = 0; i < 3; ++i) r.ref_p(i) = parse_double(fields[c++], line_no);
    r.kkt = parse_double(fields[c++], line_no);
    r.solve_ms = parse_double(fields[c++], line_no);
    const std::string& flag = fields[c++];
    if (flag != "0" && flag != "1")
      throw std::runtime_error("csv line " + std::to_string(line_no) + ": bad fault flag");
    r.fault_active = flag == "1";
    log.rows.push_back(r);
  }
  return log;
}

TrajectoryLog import_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_csv(in);
}

json metrics_to_json(const Metrics& m) {
  return {{"max_alt_drop", m.max_alt_drop},
          {"max_xy_offset", m.max_xy_offset},
          {"recovery_time", optional_json(m.recovery_time)},
          {"success", m.success},
          {"rms_tracking_error", m.rms_tracking_error},
          {"mean_solver_latency", m.mean_solver_latency}};
}

json summary_to_json(const MonteCarloSummary& s) {
  json runs = json::array();
  std::vector<double> xy, drop, recovery;
  for (std::size_t i = 0; i < s.metrics.size(); ++i) {
    json r = metrics_to_json(s.metrics[i]);
    r["seed"] = s.seeds[i];
    runs.push_back(std::move(r));
    xy.push_back(s.metrics[i].max_xy_offset);
    drop.push_back(s.metrics[i].max_alt_drop);
    if (s.metrics[i].recovery_time) recovery.push_back(*s.metrics[i].recovery_time);
  }
  return {{"runs", s.runs},
          {"base_seed", s.base_seed},
          {"success_rate", s.success_rate},
          {"recovered_within_1s", s.recovered_within_1s},
          {"recovered_within_2_5s", s.recovered_within_2_5s},
          {"xy_below_0_8", s.xy_below_0_8},
          {"drop_below_1_0", s.drop_below_1_0},
          {"percentiles",
           {{"max_xy_offset", percentiles_json(xy)},
            {"max_alt_drop", percentiles_json(drop)},
            {"recovery_time", percentiles_json(recovery)}}},
          {"histograms",
           {{"max_xy_offset", histogram_json(s.xy_histogram)},
            {"max_alt_drop", histogram_json(s.drop_histogram)}}},
          {"per_run", std::move(runs)}};
}

void write_json(const json& doc, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace ftq
