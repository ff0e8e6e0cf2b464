#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "sttis/tensor.hpp"

namespace sttis {

// Half-open slot interval [lo, hi).
struct SlotRange {
    std::size_t lo = 0;
    std::size_t hi = 0;

    std::size_t size() const { return hi - lo; }
    bool contains(std::size_t t) const { return t >= lo && t < hi; }
};

struct GridSpec {
    std::size_t rows = 10;
    std::size_t cols = 20;
    double lat_min = 0.0, lat_max = 1.0;
    double lon_min = 0.0, lon_max = 1.0;
    std::size_t slot_minutes = 30;

    std::size_t n() const { return rows * cols; }
    std::size_t slots_per_day() const { return 1440 / slot_minutes; }
    void check() const;

    // Region id = row * cols + col, row 0 at the southern edge. Min edges
    // inclusive, max edges exclusive. Returns -1 when outside the bbox.
    long region_of(double lat, double lon) const;
};

// Slotted per-region inflow/outflow series.
struct FlowSeries {
    std::size_t n = 0;
    std::size_t num_slots = 0;
    std::size_t start_slot_of_day = 0;
    Tensor inflow;   // num_slots x n
    Tensor outflow;  // num_slots x n

    static FlowSeries zeros(std::size_t n, std::size_t num_slots);
    std::size_t slot_of_day(std::size_t t, std::size_t slots_per_day) const {
        return (start_slot_of_day + t) % slots_per_day;
    }
};

struct ScaleParams {
    double in_min = 0.0, in_max = 0.0;
    double out_min = 0.0, out_max = 0.0;
};

struct SplitRanges {
    SlotRange train;  // excludes validation
    SlotRange val;
    SlotRange test;
};

// Min-max scaling per channel, statistics from the training slots only.
// A degenerate channel (max == min) maps to all zeros.
struct NormalizeResult {
    FlowSeries flows;
    ScaleParams scale;
    bool in_degenerate = false;
    bool out_degenerate = false;
};
NormalizeResult normalize(const FlowSeries& flows, const SlotRange& train_slots);

enum class Channel { In, Out };
Tensor denormalize(const Tensor& values, const ScaleParams& scale, Channel channel);
double denormalize_value(double v, const ScaleParams& scale, Channel channel);

// Contiguous chronological split in whole days; validation is the trailing
// val_fraction of the training days.
SplitRanges split(const FlowSeries& flows, std::size_t slots_per_day, std::size_t train_days,
                  std::size_t test_days, double val_fraction);

// Flows CSV (`slot,region,inflow,outflow`) plus sidecar metadata JSON.
struct FlowsMetadata {
    std::size_t n = 0, rows = 0, cols = 0;
    std::size_t slot_minutes = 0, slots_per_day = 0;
    std::size_t num_slots = 0, start_slot_of_day = 0;
    bool has_scale = false;
    ScaleParams scale;
};

void write_flows_csv(const std::string& path, const FlowSeries& flows);
FlowSeries read_flows_csv(const std::string& path, std::size_t n, std::size_t num_slots,
                          std::size_t start_slot_of_day);
void write_flows_dir(const std::string& dir, const FlowSeries& flows, const FlowsMetadata& meta);
struct FlowsBundle {
    FlowSeries flows;
    FlowsMetadata meta;
};
FlowsBundle read_flows_dir(const std::string& dir);

}  // namespace sttis
