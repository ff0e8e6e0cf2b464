#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <functional>
#include <random>
#include <vector>

#include "sttis/similarity.hpp"

using namespace sttis;

namespace {

// Brute-force DTW oracle: recursively enumerate monotone alignments.
double dtw_brute(const std::vector<double>& a, const std::vector<double>& b) {
    std::function<double(std::size_t, std::size_t)> rec = [&](std::size_t i,
                                                              std::size_t j) -> double {
        const double cost = std::fabs(a[i] - b[j]);
        if (i == 0 && j == 0) return cost;
        double best = 1e300;
        if (i > 0) best = std::min(best, rec(i - 1, j));
        if (j > 0) best = std::min(best, rec(i, j - 1));
        if (i > 0 && j > 0) best = std::min(best, rec(i - 1, j - 1));
        return cost + best;
    };
    return rec(a.size() - 1, b.size() - 1);
}

FlowSeries constant_flows(std::size_t n, std::size_t num_slots, double in_v, double out_v) {
    FlowSeries f = FlowSeries::zeros(n, num_slots);
    f.inflow.fill(in_v);
    f.outflow.fill(out_v);
    return f;
}

}  // namespace

TEST_CASE("dtw of identical sequences is zero") {
    CHECK(dtw_distance({1, 2, 3}, {1, 2, 3}) == 0.0);
}

TEST_CASE("dtw of two singletons is their absolute difference") {
    CHECK(dtw_distance({0}, {5}) == 5.0);
}

TEST_CASE("dtw matches the brute-force alignment oracle") {
    CHECK(dtw_distance({1, 2, 3}, {2, 3, 4}) == dtw_brute({1, 2, 3}, {2, 3, 4}));
    CHECK(dtw_distance({1, 2, 3}, {2, 3, 4}) == 2.0);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    std::uniform_int_distribution<std::size_t> len(1, 6);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> a(len(rng)), b(len(rng));
        for (double& v : a) v = u(rng);
        for (double& v : b) v = u(rng);
        CHECK(dtw_distance(a, b) == doctest::Approx(dtw_brute(a, b)).epsilon(1e-12));
    }
}

TEST_CASE("dtw is symmetric and rejects empty input") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 5.0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> a(4), b(7);
        for (double& v : a) v = u(rng);
        for (double& v : b) v = u(rng);
        CHECK(dtw_distance(a, b) == dtw_distance(b, a));
    }
    CHECK_THROWS_AS(dtw_distance({}, {1.0}), std::invalid_argument);
}

TEST_CASE("constant flow gives a constant profile") {
    FlowSeries f = constant_flows(3, 20, 4.0, 6.0);
    DailyProfile p = daily_profile(f, 1, {0, 20}, 10);
    REQUIRE(p.values.size() == 10);
    for (double v : p.values) CHECK(v == 10.0);
}

TEST_CASE("profile averages across days") {
    FlowSeries f = FlowSeries::zeros(1, 8);  // two 4-slot days
    f.inflow.at(0, 0) = 2.0;
    f.inflow.at(4, 0) = 4.0;
    DailyProfile p = daily_profile(f, 0, {0, 8}, 4);
    CHECK(p.values[0] == 3.0);
    CHECK(p.values[1] == 0.0);
}

TEST_CASE("profile respects start_slot_of_day") {
    FlowSeries f = FlowSeries::zeros(1, 4);
    f.start_slot_of_day = 2;
    f.inflow.at(0, 0) = 5.0;  // lands on slot-of-day 2
    DailyProfile p = daily_profile(f, 0, {0, 4}, 4);
    CHECK(p.values[2] == 5.0);
    CHECK(p.values[0] == 0.0);
}

TEST_CASE("identical profiles give similarity 1") {
    FlowSeries f = constant_flows(4, 12, 1.0, 2.0);
    SimilarityMatrix m = similarity_matrix(f, {0, 12}, 6);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(m.at(i, j) == 1.0);
}

TEST_CASE("dtw distance 1 maps to similarity 0.5") {
    // Region 1 differs from region 0 by 1 in a single slot of a 1-day profile.
    FlowSeries f = FlowSeries::zeros(2, 4);
    f.inflow.at(0, 1) = 1.0;
    SimilarityMatrix m = similarity_matrix(f, {0, 4}, 4);
    CHECK(m.at(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("similarity matrix is symmetric with unit diagonal, random flows") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 30.0);
    for (int trial = 0; trial < 100; ++trial) {
        FlowSeries f = FlowSeries::zeros(6, 16);
        for (double& v : f.inflow.data) v = u(rng);
        for (double& v : f.outflow.data) v = u(rng);
        SimilarityMatrix m = similarity_matrix(f, {0, 16}, 8);
        for (std::size_t i = 0; i < 6; ++i) {
            CHECK(m.at(i, i) == 1.0);
            for (std::size_t j = 0; j < 6; ++j) {
                CHECK(m.at(i, j) == m.at(j, i));
                CHECK(m.at(i, j) > 0.0);
                CHECK(m.at(i, j) <= 1.0);
            }
        }
    }
}

TEST_CASE("larger dtw distance means strictly smaller similarity") {
    const std::vector<double> base(8, 1.0);
    std::vector<double> near = base, far = base;
    near[0] += 1.0;
    far[0] += 5.0;
    const double dn = dtw_distance(base, near), df = dtw_distance(base, far);
    REQUIRE(dn < df);
    CHECK(1.0 / (1.0 + dn) > 1.0 / (1.0 + df));
}

TEST_CASE("similarity CSV round trip keeps 9 significant digits") {
    std::mt19937_64 rng(14);
    std::uniform_real_distribution<double> u(0.0, 30.0);
    FlowSeries f = FlowSeries::zeros(5, 12);
    for (double& v : f.inflow.data) v = u(rng);
    SimilarityMatrix m = similarity_matrix(f, {0, 12}, 6);
    SimilarityMatrix back = SimilarityMatrix::from_csv(m.to_csv());
    REQUIRE(back.n == m.n);
    for (std::size_t i = 0; i < m.values.size(); ++i)
        CHECK(back.values[i] == doctest::Approx(m.values[i]).epsilon(1e-8));
}

TEST_CASE("training range shorter than one day is rejected") {
    FlowSeries f = constant_flows(2, 10, 1.0, 1.0);
    CHECK_THROWS_AS(daily_profile(f, 0, {0, 5}, 10), std::invalid_argument);
}
