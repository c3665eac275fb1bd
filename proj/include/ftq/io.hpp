#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftq/simkit.hpp"

namespace ftq {

/// CSV column names, in file order.
const std::vector<std::string>& csv_columns();

/// Shortest decimal that parses back to the same double.
std::string format_double(double value);

void write_csv(const TrajectoryLog& log, std::ostream& out);
/// Throws std::runtime_error naming the path on I/O failure.
void export_csv(const TrajectoryLog& log, const std::filesystem::path& path);

/// Inverse of write_csv. Diagnostics that are not columns (guard trips,
/// divergence flag) come back as defaults. Throws std::runtime_error.
TrajectoryLog read_csv(std::istream& in);
TrajectoryLog import_csv(const std::filesystem::path& path);

nlohmann::json metrics_to_json(const Metrics& metrics);
/// Per-run records plus aggregate rates, percentiles and histograms.
nlohmann::json summary_to_json(const MonteCarloSummary& summary);

/// Pretty-printed with a trailing newline. Throws std::runtime_error.
void write_json(const nlohmann::json& doc, const std::filesystem::path& path);

}  // namespace ftq
