#pragma once

#include <string>
#include <vector>

#include "sttis/flows.hpp"

namespace sttis {

struct TripRecord {
    double origin_lat = 0.0, origin_lon = 0.0;
    double dest_lat = 0.0, dest_lon = 0.0;
    long long depart = 0;  // epoch seconds
    long long arrive = 0;
};

struct IngestReport {
    std::size_t total_rows = 0;
    std::size_t parsed = 0;
    std::size_t malformed = 0;
    std::size_t dropped_out_of_bbox = 0;
    std::vector<std::string> row_errors;  // "line N: reason", capped
};

// ISO-8601 (`YYYY-MM-DDTHH:MM:SS`, 'T' or ' ' separator, optional trailing
// 'Z') or plain epoch seconds.
long long parse_timestamp(const std::string& text);

// Aggregates trip records into per-slot per-region counts. Slot 0 is the
// slot of the earliest in-bbox departure; slot-of-day is aligned to UTC
// midnight. Aborts when malformed rows exceed 1% of the data rows.
FlowSeries parse_trips(const std::string& path, const GridSpec& grid, IngestReport& report);

}  // namespace sttis
