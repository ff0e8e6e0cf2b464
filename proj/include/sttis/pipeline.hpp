#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sttis/flows.hpp"
#include "sttis/graph.hpp"
#include "sttis/model.hpp"

namespace sttis {

struct SampleConfig {
    std::size_t recent = 6;  // h
    std::size_t daily = 10;
    std::size_t weekly = 0;
    std::size_t w = 6;
    std::size_t o = 48;

    std::size_t q_size() const { return recent + daily + weekly; }
    // Earliest slot any context window reaches below the target.
    std::size_t max_lookback() const;
};

// Context slots Q = {t-1..t-h} U {t-j*o} U {t-y*7*o}, ascending.
std::vector<std::size_t> context_slots(std::size_t t, const SampleConfig& cfg);

// Builds the model input for target slot t from normalized flows.
TemporalContext assemble_sample(const FlowSeries& flows_norm, std::size_t t,
                                const SampleConfig& cfg);

struct Metrics {
    double rmse_in = 0.0, rmse_out = 0.0;
    double mape_in = 0.0, mape_out = 0.0;
    std::size_t n_samples = 0;  // included region-slot pairs, both channels
    std::size_t n_excluded = 0;

    std::string to_json() const;
};

// RMSE/MAPE per channel over region-slot pairs whose ground truth (original
// units) is at least `threshold`; excluded pairs count toward n_excluded.
Metrics compute_metrics(const std::vector<double>& truth_in, const std::vector<double>& pred_in,
                        const std::vector<double>& truth_out, const std::vector<double>& pred_out,
                        double threshold);

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double seconds = 0.0;
};

struct TrainOptions {
    std::size_t epochs = 50;
    std::size_t batch = 32;
    double lr = 0.001;
    std::uint64_t seed = 0;
    bool verbose = false;
};

struct TrainResult {
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
};

// Seeded mini-batch training on the train range, validation each epoch,
// best-validation parameters restored into `model` on return.
TrainResult train(Model& model, const FlowSeries& flows_norm, const RegionGraph& graph,
                  const SampleConfig& sample_cfg, const SlotRange& train_range,
                  const SlotRange& val_range, const TrainOptions& opt);

// Model predictions over `range`, denormalized, against the raw series.
Metrics evaluate(const Model& model, const FlowSeries& flows_norm, const FlowSeries& flows_raw,
                 const ScaleParams& scale, const RegionGraph& graph,
                 const SampleConfig& sample_cfg, const SlotRange& range, double threshold = 10.0);

// Historical average: per (region, slot-of-day) mean over the training range.
Metrics ha_baseline(const FlowSeries& flows_raw, const SlotRange& train_range,
                    const SlotRange& eval_range, std::size_t slots_per_day,
                    double threshold = 10.0);

// Synthetic desk-scale traffic: per-region daily sinusoid with a slowly
// drifting amplitude, lag-2 cross-region coupling, seeded noise, clamped at 0.
// See synth_generate() in pipeline.cpp for the exact generative equations.
FlowSeries synth_generate(std::size_t n, std::size_t days, std::size_t o, std::uint64_t seed);

void write_epoch_log(const std::string& path, const std::vector<EpochLog>& log);

}  // namespace sttis
