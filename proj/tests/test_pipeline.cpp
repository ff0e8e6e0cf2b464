#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "sttis/pipeline.hpp"
#include "sttis/similarity.hpp"

using namespace sttis;

namespace {

// Direct-summation oracle for the metrics, written independently of the
// vectorized implementation.
struct OracleMetrics {
    double rmse, mape;
    std::size_t kept, dropped;
};

OracleMetrics metrics_oracle(const std::vector<double>& truth, const std::vector<double>& pred,
                             double threshold) {
    double ss = 0.0, ape = 0.0;
    std::size_t kept = 0, dropped = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < threshold) {
            ++dropped;
            continue;
        }
        ss += (pred[i] - truth[i]) * (pred[i] - truth[i]);
        ape += std::abs(pred[i] - truth[i]) / truth[i];
        ++kept;
    }
    return {std::sqrt(ss / kept), ape / kept, kept, dropped};
}

}  // namespace

TEST_CASE("context slots: default recipe reaches back ten days") {
    SampleConfig cfg;  // recent 6, daily 10, weekly 0, o = 48
    const std::size_t t = 600;
    auto q = context_slots(t, cfg);
    CHECK(q.size() == 16);
    CHECK(std::is_sorted(q.begin(), q.end()));
    CHECK(q.front() == t - 10 * 48);  // earliest daily offset
    CHECK(q.back() == t - 1);
    for (std::size_t j = 1; j <= 6; ++j)
        CHECK(std::count(q.begin(), q.end(), t - j) == 1);
    for (std::size_t j = 1; j <= 10; ++j)
        CHECK(std::count(q.begin(), q.end(), t - j * 48) == 1);
}

TEST_CASE("context slots: weekly recipe and the one-slot recipe") {
    SampleConfig cfg;
    cfg.recent = 6;
    cfg.daily = 6;
    cfg.weekly = 4;
    const std::size_t t = 4 * 7 * 48 + 5;
    auto q = context_slots(t, cfg);
    CHECK(q.size() == 16);
    CHECK(q.front() == t - 4 * 7 * 48);

    cfg.recent = 1;
    cfg.daily = 0;
    cfg.weekly = 0;
    auto q1 = context_slots(100, cfg);
    REQUIRE(q1.size() == 1);
    CHECK(q1[0] == 99);
    CHECK(cfg.max_lookback() == 1 + cfg.w);
}

TEST_CASE("context slots: duplicates collapse") {
    SampleConfig cfg;
    cfg.recent = 48;  // t-48 appears in both the recent run and daily offsets
    cfg.daily = 2;
    cfg.weekly = 0;
    auto q = context_slots(500, cfg);
    CHECK(q.size() == 49);  // 48 recent + 2 daily, one shared
    CHECK(std::adjacent_find(q.begin(), q.end()) == q.end());
}

TEST_CASE("assemble_sample windows and truth line up with the series") {
    SampleConfig cfg;
    cfg.recent = 2;
    cfg.daily = 1;
    cfg.weekly = 0;
    cfg.w = 3;
    cfg.o = 6;
    FlowSeries f = FlowSeries::zeros(2, 40);
    for (std::size_t t = 0; t < 40; ++t)
        for (std::size_t i = 0; i < 2; ++i) {
            f.inflow.at(t, i) = 100.0 * i + t;
            f.outflow.at(t, i) = 1000.0 + 100.0 * i + t;
        }
    const std::size_t t = 20;
    TemporalContext ctx = assemble_sample(f, t, cfg);
    CHECK(ctx.target_slot == 20);
    REQUIRE(ctx.context.size() == 3);
    CHECK(ctx.context[0].slot == 14);  // t - o
    CHECK(ctx.context[1].slot == 18);
    CHECK(ctx.context[2].slot == 19);
    // Window for slot s covers [s-w, s-1], most recent last; the slot's own
    // value stays out of its input so the truth never leaks.
    CHECK(ctx.target.in_window.at(0, 2) == 19.0);
    CHECK(ctx.target.in_window.at(0, 0) == 17.0);
    CHECK(ctx.target.in_window.at(1, 2) == 119.0);
    CHECK(ctx.context[0].out_window.at(1, 2) == 1113.0);
    CHECK(ctx.target.slot_of_day == 20 % 6);
    CHECK(ctx.truth.at(0, 0) == 20.0);
    CHECK(ctx.truth.at(1, 1) == 1120.0);

    // Too early for the lookback: must refuse rather than wrap.
    CHECK_THROWS_AS(assemble_sample(f, cfg.max_lookback() - 1, cfg), std::invalid_argument);
}

TEST_CASE("metrics: worked two-point example") {
    // truth [10, 14], pred [13, 10]: RMSE = sqrt((9+16)/2), MAPE = (0.3 + 2/7)/2.
    Metrics m = compute_metrics({10, 14}, {13, 10}, {10, 14}, {13, 10}, 10.0);
    CHECK(m.rmse_in == doctest::Approx(std::sqrt(12.5)).epsilon(1e-12));
    CHECK(m.mape_in == doctest::Approx((0.3 + 2.0 / 7.0) / 2.0).epsilon(1e-12));
    CHECK(m.rmse_out == m.rmse_in);
    CHECK(m.n_samples == 4);
    CHECK(m.n_excluded == 0);
}

TEST_CASE("metrics: threshold excludes silent pairs per channel") {
    Metrics m = compute_metrics({5, 20}, {99, 25}, {15, 2}, {10, 50}, 10.0);
    // Inflow keeps only the 20; the 5 (and its wild prediction) are excluded.
    CHECK(m.rmse_in == doctest::Approx(5.0));
    CHECK(m.mape_in == doctest::Approx(0.25));
    CHECK(m.rmse_out == doctest::Approx(5.0));
    CHECK(m.n_samples == 2);
    CHECK(m.n_excluded == 2);
}

TEST_CASE("metrics: all pairs excluded is an error") {
    CHECK_THROWS_AS(compute_metrics({1, 2}, {1, 2}, {3, 4}, {3, 4}, 10.0), std::runtime_error);
}

TEST_CASE("metrics agree with the direct-summation oracle on random data") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(0.0, 40.0);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t k = 200;
        std::vector<double> ti(k), pi(k), to(k), po(k);
        for (std::size_t i = 0; i < k; ++i) {
            ti[i] = u(rng);
            pi[i] = u(rng);
            to[i] = u(rng);
            po[i] = u(rng);
        }
        Metrics m = compute_metrics(ti, pi, to, po, 10.0);
        OracleMetrics oi = metrics_oracle(ti, pi, 10.0);
        OracleMetrics oo = metrics_oracle(to, po, 10.0);
        CHECK(m.rmse_in == doctest::Approx(oi.rmse).epsilon(1e-9));
        CHECK(m.mape_in == doctest::Approx(oi.mape).epsilon(1e-9));
        CHECK(m.rmse_out == doctest::Approx(oo.rmse).epsilon(1e-9));
        CHECK(m.mape_out == doctest::Approx(oo.mape).epsilon(1e-9));
        CHECK(m.n_samples == oi.kept + oo.kept);
        CHECK(m.n_excluded == oi.dropped + oo.dropped);
    }
}

TEST_CASE("historical average nails a constant series") {
    FlowSeries f = FlowSeries::zeros(2, 10 * 6);
    for (double& v : f.inflow.data) v = 25.0;
    for (double& v : f.outflow.data) v = 25.0;
    Metrics m = ha_baseline(f, {0, 36}, {36, 60}, 6);
    CHECK(m.rmse_in == doctest::Approx(0.0));
    CHECK(m.mape_out == doctest::Approx(0.0));
}

TEST_CASE("historical average of an alternating-day series errs by the gap half") {
    // Slot value alternates 10/30 by day; the per-slot-of-day training mean
    // is 20, so every evaluation pair misses by 10.
    const std::size_t o = 4;
    FlowSeries f = FlowSeries::zeros(1, 8 * o);
    for (std::size_t t = 0; t < f.num_slots; ++t) {
        const double v = ((t / o) % 2 == 0) ? 10.0 : 30.0;
        f.inflow.at(t, 0) = v;
        f.outflow.at(t, 0) = v;
    }
    Metrics m = ha_baseline(f, {0, 6 * o}, {6 * o, 8 * o}, o, 5.0);
    CHECK(m.rmse_in == doctest::Approx(10.0));
    CHECK(m.rmse_out == doctest::Approx(10.0));
}

TEST_CASE("synthetic series: deterministic, non-negative, daily-periodic") {
    FlowSeries a = synth_generate(9, 10, 24, 42);
    FlowSeries b = synth_generate(9, 10, 24, 42);
    CHECK(a.inflow.data == b.inflow.data);
    CHECK(a.outflow.data == b.outflow.data);
    FlowSeries c = synth_generate(9, 10, 24, 43);
    CHECK(a.inflow.data != c.inflow.data);
    CHECK(a.num_slots == 240);
    for (double v : a.inflow.data) CHECK(v >= 0.0);
    for (double v : a.outflow.data) CHECK(v >= 0.0);

    // The daily cycle dominates: lag-o autocorrelation beats lag-o/2.
    for (std::size_t region : {0u, 4u}) {
        auto autocorr = [&](std::size_t lag) {
            double mean = 0.0;
            for (std::size_t t = 0; t < a.num_slots; ++t) mean += a.outflow.at(t, region);
            mean /= static_cast<double>(a.num_slots);
            double num = 0.0, den = 0.0;
            for (std::size_t t = 0; t + lag < a.num_slots; ++t)
                num += (a.outflow.at(t, region) - mean) * (a.outflow.at(t + lag, region) - mean);
            for (std::size_t t = 0; t < a.num_slots; ++t)
                den += (a.outflow.at(t, region) - mean) * (a.outflow.at(t, region) - mean);
            return num / den;
        };
        CHECK(autocorr(24) > autocorr(12));
        CHECK(autocorr(24) > 0.5);
    }
}

TEST_CASE("training: zero learning rate leaves the parameters alone") {
    FlowSeries raw = synth_generate(4, 8, 12, 7);
    NormalizeResult norm = normalize(raw, {0, 6 * 12});
    SimilarityMatrix sim = similarity_matrix(raw, {0, 6 * 12}, 12);
    RegionGraph g = build_graph(sim, 1);
    ModelConfig cfg;
    cfg.n = 4;
    cfg.o = 12;
    cfg.d = 4;
    cfg.w = 3;
    cfg.p = 2;
    cfg.f = 2;
    cfg.alpha = 1;
    cfg.heads_dli = 2;
    cfg.heads_dlm = 2;
    cfg.dropout = 0.0;
    cfg.q_recipe = {2, 1, 0};
    cfg.ffn_mult = 2;
    Model model(cfg, 3);
    std::vector<double> before;
    for (const auto& p : model.store().params())
        before.insert(before.end(), p.value.data.begin(), p.value.data.end());
    SampleConfig sc;
    sc.recent = 2;
    sc.daily = 1;
    sc.weekly = 0;
    sc.w = 3;
    sc.o = 12;
    TrainOptions opt;
    opt.epochs = 1;
    opt.batch = 8;
    opt.lr = 0.0;
    opt.seed = 5;
    train(model, norm.flows, g, sc, {0, 60}, {60, 72}, opt);
    std::vector<double> after;
    for (const auto& p : model.store().params())
        after.insert(after.end(), p.value.data.begin(), p.value.data.end());
    CHECK(before == after);
}

TEST_CASE("training: loss drops and a fixed seed reproduces the run") {
    FlowSeries raw = synth_generate(4, 8, 12, 7);
    NormalizeResult norm = normalize(raw, {0, 6 * 12});
    SimilarityMatrix sim = similarity_matrix(raw, {0, 6 * 12}, 12);
    RegionGraph g = build_graph(sim, 1);
    ModelConfig cfg;
    cfg.n = 4;
    cfg.o = 12;
    cfg.d = 4;
    cfg.w = 3;
    cfg.p = 2;
    cfg.f = 2;
    cfg.alpha = 1;
    cfg.heads_dli = 2;
    cfg.heads_dlm = 2;
    cfg.dropout = 0.0;
    cfg.q_recipe = {2, 1, 0};
    cfg.ffn_mult = 2;
    SampleConfig sc;
    sc.recent = 2;
    sc.daily = 1;
    sc.weekly = 0;
    sc.w = 3;
    sc.o = 12;
    TrainOptions opt;
    opt.epochs = 8;
    opt.batch = 8;
    opt.lr = 0.005;
    opt.seed = 5;

    Model m1(cfg, 3);
    TrainResult r1 = train(m1, norm.flows, g, sc, {0, 60}, {60, 72}, opt);
    REQUIRE(r1.log.size() == 8);
    CHECK(r1.log.back().train_loss < r1.log.front().train_loss);
    CHECK(r1.best_val_loss <= r1.log.front().val_loss);

    Model m2(cfg, 3);
    TrainResult r2 = train(m2, norm.flows, g, sc, {0, 60}, {60, 72}, opt);
    for (std::size_t e = 0; e < r1.log.size(); ++e) {
        CHECK(r1.log[e].train_loss == r2.log[e].train_loss);
        CHECK(r1.log[e].val_loss == r2.log[e].val_loss);
    }
    for (std::size_t p = 0; p < m1.store().params().size(); ++p)
        CHECK(m1.store().params()[p].value.data == m2.store().params()[p].value.data);

    Metrics eval = evaluate(m1, norm.flows, raw, norm.scale, g, sc, {72, 96}, 5.0);
    CHECK(eval.n_samples > 0);
    CHECK(std::isfinite(eval.rmse_in));
    CHECK(std::isfinite(eval.mape_out));
}
