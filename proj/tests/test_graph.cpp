#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "sttis/graph.hpp"

using namespace sttis;

namespace {

SimilarityMatrix random_sim(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    SimilarityMatrix m;
    m.n = n;
    m.values.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        m.at(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) m.at(i, j) = m.at(j, i) = u(rng);
    }
    return m;
}

// Independent eccentricity oracle: plain BFS from one source.
std::vector<int> bfs_dist(const RegionGraph& g, std::size_t src) {
    std::vector<int> dist(g.n, -1);
    std::vector<std::size_t> queue{src};
    dist[src] = 0;
    for (std::size_t qi = 0; qi < queue.size(); ++qi)
        for (auto v : g.adjacency[queue[qi]])
            if (dist[v] < 0) {
                dist[v] = dist[queue[qi]] + 1;
                queue.push_back(v);
            }
    return dist;
}

}  // namespace

TEST_CASE("n=4: two hubs, one child each, a 4-cycle of degree 2") {
    SimilarityMatrix sim = random_sim(4, 1);
    RegionGraph g = build_graph(sim, 0);
    REQUIRE(g.hubs.size() == 2);
    for (auto h : g.hubs) CHECK(g.children.at(h).size() == 1);
    CHECK(g.num_edges() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g.adjacency[i].size() == 2);
    ValidationReport r = validate(g);
    CHECK(r.connected);
    CHECK(r.diameter == 2);

    const std::size_t h1 = g.hubs[0], h2 = g.hubs[1];
    const std::size_t c1 = g.children.at(h1)[0], c2 = g.children.at(h2)[0];
    auto has_edge = [&](std::size_t a, std::size_t b) {
        return std::binary_search(g.adjacency[a].begin(), g.adjacency[a].end(), b);
    };
    CHECK(has_edge(h1, c1));
    CHECK(has_edge(h2, c2));
    CHECK(has_edge(c1, c2));
    CHECK(has_edge(h1, h2));  // star hub links the hubs (sqrt(4) integral)
    CHECK(g.star_hub.has_value());
}

TEST_CASE("n=9: three hubs, two children each, max degree 4") {
    RegionGraph g = build_graph(random_sim(9, 2), 0);
    REQUIRE(g.hubs.size() == 3);
    for (auto h : g.hubs) CHECK(g.children.at(h).size() == 2);
    CHECK(g.leftovers.empty());
    CHECK(g.star_hub.has_value());
    std::size_t max_deg = 0;
    for (const auto& a : g.adjacency) max_deg = std::max(max_deg, a.size());
    CHECK(max_deg <= 4);  // max(2*3-2, 9-9+3-1)
    CHECK(validate(g).pass);
}

TEST_CASE("n=200: 14 hubs, 13 children each, 4 leftovers; proof-expression degrees") {
    RegionGraph g = build_graph(random_sim(200, 3), 0);
    REQUIRE(g.hubs.size() == 14);
    for (auto h : g.hubs) CHECK(g.children.at(h).size() == 13);
    CHECK(g.leftovers.size() == 4);
    CHECK_FALSE(g.star_hub.has_value());
    for (auto l : g.leftovers) CHECK(g.adjacency[l].size() == 14);
    for (auto h : g.hubs) CHECK(g.adjacency[h].size() == 13 + 4);  // n - c^2 + c - 1 = 17
    for (auto h : g.hubs)
        for (auto c : g.children.at(h)) CHECK(g.adjacency[c].size() == 2 * 14 - 2);
    CHECK(validate(g).pass);
}

TEST_CASE("theorem invariants for n in [4, 120], random matrices") {
    for (std::size_t n = 4; n <= 120; ++n) {
        RegionGraph g = build_graph(random_sim(n, 41 * n), n);
        ValidationReport r = validate(g);
        CAPTURE(n);
        REQUIRE(r.pass);
        CHECK(r.max_degree <= degree_bound(n));
        // Hubs + children + leftovers partition the regions.
        std::vector<bool> seen(n, false);
        std::size_t count = 0;
        auto mark = [&](std::size_t i) {
            REQUIRE_FALSE(seen[i]);
            seen[i] = true;
            ++count;
        };
        for (auto h : g.hubs) mark(h);
        for (const auto& [h, kids] : g.children)
            for (auto k : kids) mark(k);
        for (auto l : g.leftovers) mark(l);
        CHECK(count == n);
        // Independent BFS oracle against the report diameter.
        std::size_t ecc_max = 0;
        for (std::size_t s = 0; s < n; ++s) {
            auto dist = bfs_dist(g, s);
            for (auto d : dist) {
                REQUIRE(d >= 0);
                ecc_max = std::max<std::size_t>(ecc_max, static_cast<std::size_t>(d));
            }
        }
        CHECK(ecc_max == r.diameter);
        CHECK(ecc_max <= 2);
    }
}

TEST_CASE("path graph on 5 nodes fails validation") {
    RegionGraph g;
    g.n = 5;
    g.adjacency = {{1}, {0, 2}, {1, 3}, {2, 4}, {3}};
    ValidationReport r = validate(g);
    CHECK(r.connected);
    CHECK(r.diameter == 4);
    CHECK_FALSE(r.pass);
}

TEST_CASE("complete graph on 5 nodes violates the degree bound") {
    RegionGraph g = build_complete_graph(5);
    ValidationReport r = validate(g);
    CHECK(r.diameter == 1);
    CHECK(r.max_degree == 4);
    CHECK(degree_bound(5) == 2);
    CHECK_FALSE(r.degree_ok);
    CHECK_FALSE(r.pass);
}

TEST_CASE("neighbors: sorted, no self loops, handshake lemma") {
    RegionGraph g = build_graph(random_sim(30, 9), 1);
    std::size_t total = 0;
    for (std::size_t i = 0; i < g.n; ++i) {
        const auto& nb = g.neighbors(i);
        CHECK(std::is_sorted(nb.begin(), nb.end()));
        CHECK(std::adjacent_find(nb.begin(), nb.end()) == nb.end());
        CHECK(std::find(nb.begin(), nb.end(), i) == nb.end());
        for (auto v : nb)
            CHECK(std::binary_search(g.adjacency[v].begin(), g.adjacency[v].end(), i));
        total += nb.size();
    }
    CHECK(total == 2 * g.num_edges());
    CHECK_THROWS_AS(g.neighbors(g.n), std::out_of_range);
}

TEST_CASE("determinism: same matrix and seed give byte-identical JSON") {
    SimilarityMatrix sim = random_sim(50, 77);
    CHECK(build_graph(sim, 5).to_json() == build_graph(sim, 5).to_json());
}

// Hub selection ranks regions by their similarity *sum*, so only transforms
// that preserve sum ordering (positive affine maps) are guaranteed to leave
// the graph unchanged. A general monotone warp can reorder the sums.
TEST_CASE("ordering invariance under positive affine transforms of the matrix") {
    SimilarityMatrix sim = random_sim(40, 123);
    SimilarityMatrix warped = sim;
    for (double& v : warped.values) v = 3.5 * v + 0.25;
    CHECK(build_graph(sim, 3).to_json() == build_graph(warped, 3).to_json());
}

TEST_CASE("JSON round trip") {
    RegionGraph g = build_graph(random_sim(20, 8), 4);
    RegionGraph h = RegionGraph::from_json(g.to_json());
    CHECK(h.to_json() == g.to_json());
}

TEST_CASE("edge count stays below 1.5 n sqrt(n)") {
    for (std::size_t n : {16u, 36u, 100u, 200u, 400u}) {
        RegionGraph g = build_graph(random_sim(n, n), 0);
        CHECK(static_cast<double>(g.num_edges()) <=
              1.5 * static_cast<double>(n) * std::sqrt(static_cast<double>(n)));
    }
}

TEST_CASE("n < 4 is rejected; complete fallback works") {
    CHECK_THROWS_AS(build_graph(random_sim(3, 1), 0), std::invalid_argument);
    RegionGraph g = build_complete_graph(3);
    CHECK(g.num_edges() == 3);
    CHECK(validate(g).connected);
}

TEST_CASE("non-square similarity matrix is rejected") {
    SimilarityMatrix m;
    m.n = 5;
    m.values.assign(20, 0.5);
    CHECK_THROWS_AS(build_graph(m, 0), std::invalid_argument);
}
