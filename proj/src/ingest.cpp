#include "sttis/ingest.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sttis {

namespace {

bool all_digits(const std::string& s) {
    if (s.empty()) return false;
    for (char ch : s)
        if (!std::isdigit(static_cast<unsigned char>(ch))) return false;
    return true;
}

constexpr std::size_t kMaxRowErrors = 50;

}  // namespace

long long parse_timestamp(const std::string& text) {
    std::string s = text;
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    std::size_t start = 0;
    while (start < s.size() && s[start] == ' ') ++start;
    s = s.substr(start);
    if (s.empty()) throw std::invalid_argument("empty timestamp");
    if (all_digits(s)) return std::stoll(s);

    // YYYY-MM-DD[T ]HH:MM:SS with optional trailing Z
    if (!s.empty() && s.back() == 'Z') s.pop_back();
    std::tm tm{};
    int y, mo, d, h, mi, se;
    char sep;
    if (std::sscanf(s.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &se) != 7 ||
        (sep != 'T' && sep != ' '))
        throw std::invalid_argument("bad timestamp: " + text);
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59 ||
        se < 0 || se > 60)
        throw std::invalid_argument("timestamp out of range: " + text);
    tm.tm_year = y - 1900;
    tm.tm_mon = mo - 1;
    tm.tm_mday = d;
    tm.tm_hour = h;
    tm.tm_min = mi;
    tm.tm_sec = se;
    return static_cast<long long>(timegm(&tm));
}

FlowSeries parse_trips(const std::string& path, const GridSpec& grid, IngestReport& report) {
    grid.check();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trips file: " + path);

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty trips file: " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "origin_lat,origin_lon,dest_lat,dest_lon,depart,arrive")
        throw std::runtime_error("unexpected trips header: " + line);

    struct Event {
        long long slot_epoch;
        long region;
        bool arrival;
    };
    std::vector<Event> events;
    const long long slot_seconds = static_cast<long long>(grid.slot_minutes) * 60;

    std::size_t lineno = 1;
    report = IngestReport{};
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        ++report.total_rows;
        std::vector<std::string> fields;
        std::istringstream row(line);
        std::string cell;
        while (std::getline(row, cell, ',')) fields.push_back(cell);
        try {
            if (fields.size() != 6) throw std::invalid_argument("expected 6 fields");
            const double olat = std::stod(fields[0]), olon = std::stod(fields[1]);
            const double dlat = std::stod(fields[2]), dlon = std::stod(fields[3]);
            const long long dep = parse_timestamp(fields[4]);
            const long long arr = parse_timestamp(fields[5]);
            if (arr < dep) throw std::invalid_argument("arrive before depart");
            const long ro = grid.region_of(olat, olon);
            const long rd = grid.region_of(dlat, dlon);
            if (ro < 0 || rd < 0) {
                ++report.dropped_out_of_bbox;
                continue;
            }
            events.push_back({dep / slot_seconds, ro, false});
            events.push_back({arr / slot_seconds, rd, true});
            ++report.parsed;
        } catch (const std::exception& e) {
            ++report.malformed;
            if (report.row_errors.size() < kMaxRowErrors)
                report.row_errors.push_back("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (report.total_rows == 0) throw std::runtime_error("trips file has no data rows: " + path);
    if (report.malformed * 100 > report.total_rows)
        throw std::runtime_error("aborting: " + std::to_string(report.malformed) + " of " +
                                 std::to_string(report.total_rows) +
                                 " rows malformed (>1%); first error: " +
                                 (report.row_errors.empty() ? "?" : report.row_errors.front()));
    if (events.empty()) throw std::runtime_error("no trips inside the bounding box");

    long long min_slot = events[0].slot_epoch, max_slot = events[0].slot_epoch;
    long long min_departure = 0;
    bool have_dep = false;
    for (const auto& e : events) {
        min_slot = std::min(min_slot, e.slot_epoch);
        max_slot = std::max(max_slot, e.slot_epoch);
        if (!e.arrival && (!have_dep || e.slot_epoch < min_departure)) {
            min_departure = e.slot_epoch;
            have_dep = true;
        }
    }
    // Slot 0 anchors at the earliest departure; earlier arrivals (none, since
    // arrive >= depart) cannot precede it.
    const long long base = min_departure;
    const auto num_slots = static_cast<std::size_t>(max_slot - base + 1);
    FlowSeries flows = FlowSeries::zeros(grid.n(), num_slots);
    const auto o = static_cast<long long>(grid.slots_per_day());
    flows.start_slot_of_day = static_cast<std::size_t>(((base % o) + o) % o);
    for (const auto& e : events) {
        const auto t = static_cast<std::size_t>(e.slot_epoch - base);
        if (e.arrival)
            flows.inflow.at(t, static_cast<std::size_t>(e.region)) += 1.0;
        else
            flows.outflow.at(t, static_cast<std::size_t>(e.region)) += 1.0;
    }
    return flows;
}

}  // namespace sttis
