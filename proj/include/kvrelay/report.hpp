#pragma once

#include <cstddef>
#include <string>

#include "kvrelay/relay.hpp"

namespace kvrelay {

/// Shortest decimal text that round-trips to the same double.
std::string format_real(double x);

/// Structured report: one record per round, totals, and backfill summary.
/// Verbose reports add per-unit backfill traces with their vectors.
std::string report_to_json(const RelayReport& report, std::size_t episode, bool verbose);

/// Flat table with the fixed round columns and a trailing totals row.
std::string report_to_csv(const RelayReport& report);

}  // namespace kvrelay
