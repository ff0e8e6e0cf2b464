#include "sttis/similarity.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace sttis {

DailyProfile daily_profile(const FlowSeries& flows, std::size_t region,
                           const SlotRange& train_slots, std::size_t slots_per_day) {
    if (train_slots.size() < slots_per_day)
        throw std::invalid_argument("daily_profile: training range shorter than one day");
    DailyProfile p;
    p.region = region;
    p.values.assign(slots_per_day, 0.0);
    std::vector<std::size_t> counts(slots_per_day, 0);
    for (std::size_t t = train_slots.lo; t < train_slots.hi; ++t) {
        const std::size_t s = flows.slot_of_day(t, slots_per_day);
        p.values[s] += flows.inflow.at(t, region) + flows.outflow.at(t, region);
        ++counts[s];
    }
    for (std::size_t s = 0; s < slots_per_day; ++s)
        if (counts[s] > 0) p.values[s] /= static_cast<double>(counts[s]);
    return p;
}

double dtw_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("dtw: empty sequence");
    const std::size_t la = a.size(), lb = b.size();
    constexpr double inf = 1e300;
    std::vector<double> prev(lb + 1, inf), cur(lb + 1, inf);
    prev[0] = 0.0;
    for (std::size_t i = 1; i <= la; ++i) {
        cur[0] = inf;
        for (std::size_t j = 1; j <= lb; ++j) {
            const double cost = std::fabs(a[i - 1] - b[j - 1]);
            cur[j] = cost + std::min({prev[j], cur[j - 1], prev[j - 1]});
        }
        std::swap(prev, cur);
    }
    return prev[lb];
}

SimilarityMatrix similarity_matrix(const FlowSeries& flows, const SlotRange& train_slots,
                                   std::size_t slots_per_day) {
    if (flows.n < 2) throw std::invalid_argument("similarity_matrix: need n >= 2");
    std::vector<DailyProfile> profiles;
    profiles.reserve(flows.n);
    for (std::size_t i = 0; i < flows.n; ++i)
        profiles.push_back(daily_profile(flows, i, train_slots, slots_per_day));
    SimilarityMatrix m;
    m.n = flows.n;
    m.values.assign(flows.n * flows.n, 0.0);
    for (std::size_t i = 0; i < flows.n; ++i) {
        m.at(i, i) = 1.0;
        for (std::size_t j = i + 1; j < flows.n; ++j) {
            const double d = dtw_distance(profiles[i].values, profiles[j].values);
            const double s = 1.0 / (1.0 + d);
            m.at(i, j) = s;
            m.at(j, i) = s;
        }
    }
    return m;
}

std::string SimilarityMatrix::to_csv() const {
    std::ostringstream out;
    out << "# n=" << n << "\n";
    char buf[40];
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            std::snprintf(buf, sizeof(buf), "%.9g", at(i, j));
            out << (j ? "," : "") << buf;
        }
        out << "\n";
    }
    return out.str();
}

SimilarityMatrix SimilarityMatrix::from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("# n=", 0) != 0)
        throw std::runtime_error("similarity csv: missing '# n=' header");
    SimilarityMatrix m;
    m.n = std::stoul(line.substr(4));
    m.values.reserve(m.n * m.n);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        while (std::getline(row, cell, ',')) m.values.push_back(std::stod(cell));
    }
    if (m.values.size() != m.n * m.n)
        throw std::runtime_error("similarity csv: wrong entry count");
    return m;
}

}  // namespace sttis
