#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "sttis/flows.hpp"

namespace sttis {

// Mean total flow (inflow + outflow) per slot-of-day over the training days.
struct DailyProfile {
    std::size_t region = 0;
    std::vector<double> values;  // length o
};

struct SimilarityMatrix {
    std::size_t n = 0;
    std::vector<double> values;  // n*n row-major

    double& at(std::size_t i, std::size_t j) { return values[i * n + j]; }
    double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }

    std::string to_csv() const;
    static SimilarityMatrix from_csv(const std::string& text);
};

DailyProfile daily_profile(const FlowSeries& flows, std::size_t region,
                           const SlotRange& train_slots, std::size_t slots_per_day);

// Classic full-alignment dynamic time warping with |a_i - b_j| step cost.
double dtw_distance(const std::vector<double>& a, const std::vector<double>& b);

// M[i][j] = 1 / (1 + dtw(profile_i, profile_j)); diagonal is exactly 1.
SimilarityMatrix similarity_matrix(const FlowSeries& flows, const SlotRange& train_slots,
                                   std::size_t slots_per_day);

}  // namespace sttis
