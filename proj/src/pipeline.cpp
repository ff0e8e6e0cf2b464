#include "sttis/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace sttis {

std::size_t SampleConfig::max_lookback() const {
    std::size_t lb = 0;
    if (recent > 0) lb = recent;
    if (daily > 0) lb = std::max(lb, daily * o);
    if (weekly > 0) lb = std::max(lb, weekly * 7 * o);
    return lb + w;
}

std::vector<std::size_t> context_slots(std::size_t t, const SampleConfig& cfg) {
    std::vector<std::size_t> q;
    for (std::size_t j = cfg.weekly; j >= 1; --j) {
        const std::size_t back = j * 7 * cfg.o;
        if (back > t) throw std::invalid_argument("context_slots: weekly lookback before slot 0");
        q.push_back(t - back);
    }
    for (std::size_t j = cfg.daily; j >= 1; --j) {
        const std::size_t back = j * cfg.o;
        if (back > t) throw std::invalid_argument("context_slots: daily lookback before slot 0");
        q.push_back(t - back);
    }
    for (std::size_t j = cfg.recent; j >= 1; --j) {
        if (j > t) throw std::invalid_argument("context_slots: recent lookback before slot 0");
        q.push_back(t - j);
    }
    std::sort(q.begin(), q.end());
    q.erase(std::unique(q.begin(), q.end()), q.end());
    return q;
}

namespace {

SlotInput make_slot_input(const FlowSeries& flows, std::size_t t, const SampleConfig& cfg) {
    if (t < cfg.w)
        throw std::invalid_argument("insufficient history: slot " + std::to_string(t) +
                                    " needs a window back to slot " +
                                    std::to_string(static_cast<long>(t) - static_cast<long>(cfg.w)));
    SlotInput s;
    s.slot = static_cast<long>(t);
    s.slot_of_day = flows.slot_of_day(t, cfg.o);
    s.in_window = Tensor({flows.n, cfg.w});
    s.out_window = Tensor({flows.n, cfg.w});
    for (std::size_t i = 0; i < flows.n; ++i)
        for (std::size_t j = 0; j < cfg.w; ++j) {
            const std::size_t src = t - cfg.w + j;
            s.in_window.at(i, j) = flows.inflow.at(src, i);
            s.out_window.at(i, j) = flows.outflow.at(src, i);
        }
    return s;
}

}  // namespace

TemporalContext assemble_sample(const FlowSeries& flows_norm, std::size_t t,
                                const SampleConfig& cfg) {
    if (t >= flows_norm.num_slots)
        throw std::invalid_argument("assemble_sample: slot out of range");
    if (t < cfg.max_lookback())
        throw std::invalid_argument("assemble_sample: slot " + std::to_string(t) +
                                    " needs history back to slot " +
                                    std::to_string(static_cast<long>(t) -
                                                   static_cast<long>(cfg.max_lookback())));
    TemporalContext ctx;
    ctx.target_slot = static_cast<long>(t);
    ctx.target = make_slot_input(flows_norm, t, cfg);
    for (auto q : context_slots(t, cfg)) ctx.context.push_back(make_slot_input(flows_norm, q, cfg));
    ctx.truth = Tensor({flows_norm.n, 2});
    for (std::size_t i = 0; i < flows_norm.n; ++i) {
        ctx.truth.at(i, 0) = flows_norm.inflow.at(t, i);
        ctx.truth.at(i, 1) = flows_norm.outflow.at(t, i);
    }
    return ctx;
}

Metrics compute_metrics(const std::vector<double>& truth_in, const std::vector<double>& pred_in,
                        const std::vector<double>& truth_out, const std::vector<double>& pred_out,
                        double threshold) {
    if (truth_in.size() != pred_in.size() || truth_out.size() != pred_out.size())
        throw std::invalid_argument("compute_metrics: length mismatch");
    Metrics m;
    auto channel = [&](const std::vector<double>& y, const std::vector<double>& yhat, double& rmse,
                       double& mape) {
        double ss = 0.0, ape = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (y[i] < threshold) {
                ++m.n_excluded;
                continue;
            }
            const double d = y[i] - yhat[i];
            ss += d * d;
            ape += std::fabs(d) / y[i];
            ++count;
        }
        if (count > 0) {
            rmse = std::sqrt(ss / static_cast<double>(count));
            mape = ape / static_cast<double>(count);
        }
        m.n_samples += count;
    };
    channel(truth_in, pred_in, m.rmse_in, m.mape_in);
    channel(truth_out, pred_out, m.rmse_out, m.mape_out);
    if (m.n_samples == 0)
        throw std::runtime_error("compute_metrics: every sample fell below the threshold");
    return m;
}

std::string Metrics::to_json() const {
    nlohmann::ordered_json j;
    j["rmse_in"] = rmse_in;
    j["rmse_out"] = rmse_out;
    j["mape_in"] = mape_in;
    j["mape_out"] = mape_out;
    j["n_samples"] = n_samples;
    j["n_excluded"] = n_excluded;
    return j.dump(2) + "\n";
}

TrainResult train(Model& model, const FlowSeries& flows_norm, const RegionGraph& graph,
                  const SampleConfig& sample_cfg, const SlotRange& train_range,
                  const SlotRange& val_range, const TrainOptions& opt) {
    const std::size_t first = std::max(train_range.lo, sample_cfg.max_lookback());
    std::vector<std::size_t> targets;
    for (std::size_t t = first; t < train_range.hi; ++t) targets.push_back(t);
    if (targets.empty())
        throw std::runtime_error("train: no target slot has enough history in the training range");
    std::vector<std::size_t> val_targets;
    for (std::size_t t = std::max(val_range.lo, sample_cfg.max_lookback()); t < val_range.hi; ++t)
        val_targets.push_back(t);

    std::mt19937_64 shuffle_rng(opt.seed);
    model.dropout_rng().seed(opt.seed ^ 0x5eedULL);

    TrainResult result;
    result.best_val_loss = std::numeric_limits<double>::infinity();
    ParameterStore best = model.store();

    auto mean_loss = [&](const std::vector<std::size_t>& slots) {
        double total = 0.0;
        ForwardOptions fo;  // evaluation mode
        for (auto t : slots) {
            TemporalContext ctx = assemble_sample(flows_norm, t, sample_cfg);
            Tensor pred = model.predict(ctx, graph, fo);
            total += rmse_loss(pred, ctx.truth);
        }
        return slots.empty() ? 0.0 : total / static_cast<double>(slots.size());
    };

    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::shuffle(targets.begin(), targets.end(), shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < targets.size(); b += opt.batch) {
            const std::size_t hi = std::min(b + opt.batch, targets.size());
            const double inv = 1.0 / static_cast<double>(hi - b);
            model.store().zero_grad();
            double batch_loss = 0.0;
            for (std::size_t s = b; s < hi; ++s) {
                TemporalContext ctx = assemble_sample(flows_norm, targets[s], sample_cfg);
                Tape tape;
                ForwardOptions fo;
                fo.training = true;
                Var pred = model.forward(tape, ctx, graph, fo);
                Var loss = model.loss(tape, pred, ctx.truth);
                batch_loss += tape.value(loss).data[0];
                tape.backward(tape.scale(loss, inv));
            }
            model.store().adam_step(opt.lr);
            epoch_loss += batch_loss / static_cast<double>(hi - b);
            ++batches;
        }
        const double train_loss = epoch_loss / static_cast<double>(batches);
        const double val_loss = mean_loss(val_targets);
        const auto secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.log.push_back({epoch, train_loss, val_loss, secs});
        if (opt.verbose)
            std::cerr << "epoch " << epoch << " train " << train_loss << " val " << val_loss
                      << " (" << secs << "s)\n";
        if (val_targets.empty() || val_loss < result.best_val_loss) {
            result.best_val_loss = val_loss;
            result.best_epoch = epoch;
            best.copy_values_from(model.store());
        }
    }
    model.store().copy_values_from(best);
    return result;
}

Metrics evaluate(const Model& model, const FlowSeries& flows_norm, const FlowSeries& flows_raw,
                 const ScaleParams& scale, const RegionGraph& graph,
                 const SampleConfig& sample_cfg, const SlotRange& range, double threshold) {
    if (range.hi > flows_norm.num_slots) throw std::invalid_argument("evaluate: range out of data");
    std::vector<double> ti, pi, to, po;
    ForwardOptions fo;
    for (std::size_t t = std::max(range.lo, sample_cfg.max_lookback()); t < range.hi; ++t) {
        TemporalContext ctx = assemble_sample(flows_norm, t, sample_cfg);
        Tensor pred = model.predict(ctx, graph, fo);
        for (std::size_t i = 0; i < flows_norm.n; ++i) {
            ti.push_back(flows_raw.inflow.at(t, i));
            pi.push_back(denormalize_value(pred.at(i, 0), scale, Channel::In));
            to.push_back(flows_raw.outflow.at(t, i));
            po.push_back(denormalize_value(pred.at(i, 1), scale, Channel::Out));
        }
    }
    return compute_metrics(ti, pi, to, po, threshold);
}

Metrics ha_baseline(const FlowSeries& flows_raw, const SlotRange& train_range,
                    const SlotRange& eval_range, std::size_t slots_per_day, double threshold) {
    const std::size_t n = flows_raw.n;
    std::vector<double> sum_in(slots_per_day * n, 0.0), sum_out(slots_per_day * n, 0.0);
    std::vector<std::size_t> counts(slots_per_day, 0);
    for (std::size_t t = train_range.lo; t < train_range.hi; ++t) {
        const std::size_t s = flows_raw.slot_of_day(t, slots_per_day);
        ++counts[s];
        for (std::size_t i = 0; i < n; ++i) {
            sum_in[s * n + i] += flows_raw.inflow.at(t, i);
            sum_out[s * n + i] += flows_raw.outflow.at(t, i);
        }
    }
    std::vector<double> ti, pi, to, po;
    for (std::size_t t = eval_range.lo; t < eval_range.hi; ++t) {
        const std::size_t s = flows_raw.slot_of_day(t, slots_per_day);
        if (counts[s] == 0)
            throw std::runtime_error("ha_baseline: no training data for slot-of-day " +
                                     std::to_string(s));
        for (std::size_t i = 0; i < n; ++i) {
            ti.push_back(flows_raw.inflow.at(t, i));
            pi.push_back(sum_in[s * n + i] / static_cast<double>(counts[s]));
            to.push_back(flows_raw.outflow.at(t, i));
            po.push_back(sum_out[s * n + i] / static_cast<double>(counts[s]));
        }
    }
    return compute_metrics(ti, pi, to, po, threshold);
}

// Generative model, per region i with slot-of-day s(t) and slot t:
//   base_i(t)  = A_i * (1 + sin(2*pi*s(t)/o + phi_i))          A_i ~ U[20,60]
//   drift_i(t) = 1 + 0.5 * sin(2*pi*t/(P_i*o) + psi_i)         P_i ~ U[4.5,9.5] days
//   out_i(t)   = max(0, base_i(t)*drift_i(t) + eps)            eps ~ N(0, 2)
//   in_i(t)    = max(0, base'_i(t)*drift'_i(t)
//                       + 0.5*out_{c(i)}(t-2) + eps')          c(i) a seeded pairing
// The drift period P_i is a non-integral number of days, so the historical
// average cannot track it while the recent observations can.
FlowSeries synth_generate(std::size_t n, std::size_t days, std::size_t o, std::uint64_t seed) {
    if (n < 4) throw std::invalid_argument("synth_generate: need n >= 4");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> amp(20.0, 60.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
    std::uniform_real_distribution<double> period(4.5, 9.5);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::normal_distribution<double> noise(0.0, 2.0);

    struct RegionGen {
        double a_in, phi_in, p_in, psi_in;
        double a_out, phi_out, p_out, psi_out;
        std::size_t partner;
    };
    std::vector<RegionGen> gen(n);
    for (auto& g : gen) {
        g.a_in = amp(rng);
        g.phi_in = phase(rng);
        g.p_in = period(rng);
        g.psi_in = phase(rng);
        g.a_out = amp(rng);
        g.phi_out = phase(rng);
        g.p_out = period(rng);
        g.psi_out = phase(rng);
        g.partner = pick(rng);
    }

    const std::size_t num_slots = days * o;
    FlowSeries f = FlowSeries::zeros(n, num_slots);
    const double two_pi = 2.0 * M_PI;
    for (std::size_t t = 0; t < num_slots; ++t) {
        const double s = static_cast<double>(t % o);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& g = gen[i];
            const double base = g.a_out * (1.0 + std::sin(two_pi * s / static_cast<double>(o) +
                                                          g.phi_out));
            const double drift =
                1.0 + 0.5 * std::sin(two_pi * static_cast<double>(t) /
                                         (g.p_out * static_cast<double>(o)) +
                                     g.psi_out);
            f.outflow.at(t, i) = std::max(0.0, base * drift + noise(rng));
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto& g = gen[i];
            const double base = g.a_in * (1.0 + std::sin(two_pi * s / static_cast<double>(o) +
                                                         g.phi_in));
            const double drift =
                1.0 + 0.5 * std::sin(two_pi * static_cast<double>(t) /
                                         (g.p_in * static_cast<double>(o)) +
                                     g.psi_in);
            double v = base * drift + noise(rng);
            if (t >= 2) v += 0.5 * f.outflow.at(t - 2, g.partner);
            f.inflow.at(t, i) = std::max(0.0, v);
        }
    }
    return f;
}

void write_epoch_log(const std::string& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "epoch,train_loss,val_loss,seconds\n";
    char buf[128];
    for (const auto& e : log) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.3f\n", e.epoch, e.train_loss, e.val_loss,
                      e.seconds);
        out << buf;
    }
}

}  // namespace sttis
