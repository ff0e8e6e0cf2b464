#include "sttis/graph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace sttis {

std::size_t RegionGraph::num_edges() const {
    std::size_t deg = 0;
    for (const auto& a : adjacency) deg += a.size();
    return deg / 2;
}

const std::vector<std::size_t>& RegionGraph::neighbors(std::size_t i) const {
    if (i >= n) throw std::out_of_range("neighbors: region index out of range");
    return adjacency[i];
}

std::size_t degree_bound(std::size_t n) {
    const auto c = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
    const std::size_t a = 2 * c - 2;
    const std::size_t b = n - c * c + c - 1;
    return std::max(a, b);
}

namespace {

struct EdgeSet {
    std::size_t n;
    std::set<std::pair<std::size_t, std::size_t>> edges;

    void link(std::size_t i, std::size_t j) {
        if (i == j) return;
        if (i > j) std::swap(i, j);
        edges.insert({i, j});
    }
};

std::size_t isqrt_floor(std::size_t n) {
    auto c = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
    while ((c + 1) * (c + 1) <= n) ++c;
    while (c * c > n) --c;
    return c;
}

}  // namespace

RegionGraph build_graph(const SimilarityMatrix& sim, std::uint64_t seed) {
    const std::size_t n = sim.n;
    if (n < 4) throw std::invalid_argument("build_graph: need n >= 4 (use the complete fallback)");
    if (sim.values.size() != n * n) throw std::invalid_argument("build_graph: non-square matrix");
    const std::size_t c = isqrt_floor(n);

    RegionGraph g;
    g.n = n;
    g.seed = seed;

    // Hubs: largest off-diagonal similarity sum, ties to the lower index.
    std::vector<double> rowsum(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) rowsum[i] += sim.at(i, j);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (rowsum[a] != rowsum[b]) return rowsum[a] > rowsum[b];
        return a < b;
    });
    g.hubs.assign(order.begin(), order.begin() + c);

    std::vector<bool> is_hub(n, false), claimed(n, false);
    for (auto h : g.hubs) is_hub[h] = claimed[h] = true;

    EdgeSet es{n, {}};

    // Each hub claims its floor(sqrt(n))-1 most similar unclaimed regions.
    for (auto h : g.hubs) {
        std::vector<std::size_t> cand;
        for (std::size_t i = 0; i < n; ++i)
            if (!claimed[i]) cand.push_back(i);
        std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
            if (sim.at(h, a) != sim.at(h, b)) return sim.at(h, a) > sim.at(h, b);
            return a < b;
        });
        auto& kids = g.children[h];
        for (std::size_t j = 0; j < c - 1; ++j) {
            kids.push_back(cand[j]);
            claimed[cand[j]] = true;
            es.link(h, cand[j]);
        }
    }

    // Siblings within a hub and same-position children across hubs.
    for (std::size_t i = 0; i < c; ++i) {
        const auto& ki = g.children[g.hubs[i]];
        for (std::size_t j = 0; j < ki.size(); ++j) {
            for (std::size_t k = j + 1; k < ki.size(); ++k) es.link(ki[j], ki[k]);
            for (std::size_t u = i + 1; u < c; ++u) es.link(ki[j], g.children[g.hubs[u]][j]);
        }
    }

    if (c * c == n) {
        // Perfect square: a seeded hub becomes the star that ties hubs together.
        std::mt19937_64 rng(seed);
        const std::size_t star = g.hubs[std::uniform_int_distribution<std::size_t>(0, c - 1)(rng)];
        g.star_hub = star;
        for (auto h : g.hubs)
            if (h != star) es.link(star, h);
    } else {
        for (std::size_t i = 0; i < n; ++i)
            if (!claimed[i]) {
                g.leftovers.push_back(i);
                for (auto h : g.hubs) es.link(i, h);
            }
    }

    g.adjacency.assign(n, {});
    for (const auto& [i, j] : es.edges) {
        g.adjacency[i].push_back(j);
        g.adjacency[j].push_back(i);
    }
    for (auto& a : g.adjacency) std::sort(a.begin(), a.end());
    return g;
}

RegionGraph build_complete_graph(std::size_t n) {
    if (n < 2) throw std::invalid_argument("build_complete_graph: need n >= 2");
    RegionGraph g;
    g.n = n;
    g.adjacency.assign(n, {});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) g.adjacency[i].push_back(j);
    return g;
}

ValidationReport validate(const RegionGraph& g) {
    ValidationReport r;
    r.n = g.n;
    r.num_edges = g.num_edges();
    for (const auto& a : g.adjacency) r.max_degree = std::max(r.max_degree, a.size());
    r.degree_bound = g.n >= 4 ? degree_bound(g.n) : g.n - 1;
    r.degree_ok = r.max_degree <= r.degree_bound;

    // BFS from every node: connectivity and eccentricity.
    std::size_t diameter = 0;
    bool connected = true;
    std::vector<int> dist(g.n);
    std::deque<std::size_t> queue;
    for (std::size_t s = 0; s < g.n && connected; ++s) {
        std::fill(dist.begin(), dist.end(), -1);
        dist[s] = 0;
        queue.clear();
        queue.push_back(s);
        std::size_t seen = 1;
        while (!queue.empty()) {
            const std::size_t u = queue.front();
            queue.pop_front();
            for (auto v : g.adjacency[u])
                if (dist[v] < 0) {
                    dist[v] = dist[u] + 1;
                    diameter = std::max<std::size_t>(diameter, dist[v]);
                    queue.push_back(v);
                    ++seen;
                }
        }
        if (seen != g.n) connected = false;
    }
    r.connected = connected;
    r.diameter = connected ? diameter : 0;
    r.diameter_ok = connected && diameter <= 2;
    r.pass = r.connected && r.degree_ok && r.diameter_ok;
    return r;
}

std::string ValidationReport::to_string() const {
    std::ostringstream out;
    out << "n=" << n << " edges=" << num_edges << " max_degree=" << max_degree << " (bound "
        << degree_bound << ", " << (degree_ok ? "ok" : "FAIL") << ") connected="
        << (connected ? "yes" : "NO") << " diameter=" << diameter << " ("
        << (diameter_ok ? "ok" : "FAIL") << ") => " << (pass ? "PASS" : "FAIL");
    return out.str();
}

std::string RegionGraph::to_json() const {
    nlohmann::ordered_json j;
    j["n"] = n;
    j["seed"] = seed;
    j["hubs"] = hubs;
    nlohmann::ordered_json kids = nlohmann::ordered_json::object();
    for (const auto& [h, ch] : children) kids[std::to_string(h)] = ch;
    j["children"] = kids;
    j["leftovers"] = leftovers;
    if (star_hub)
        j["star_hub"] = *star_hub;
    else
        j["star_hub"] = nullptr;
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t i = 0; i < n; ++i)
        for (auto v : adjacency[i])
            if (i < v) edges.emplace_back(i, v);
    std::sort(edges.begin(), edges.end());
    auto je = nlohmann::ordered_json::array();
    for (const auto& [a, b] : edges) je.push_back({a, b});
    j["edges"] = je;
    return j.dump(2) + "\n";
}

RegionGraph RegionGraph::from_json(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    RegionGraph g;
    g.n = j.at("n").get<std::size_t>();
    g.seed = j.at("seed").get<std::uint64_t>();
    g.hubs = j.at("hubs").get<std::vector<std::size_t>>();
    for (auto& [key, val] : j.at("children").items())
        g.children[std::stoul(key)] = val.get<std::vector<std::size_t>>();
    g.leftovers = j.at("leftovers").get<std::vector<std::size_t>>();
    if (!j.at("star_hub").is_null()) g.star_hub = j["star_hub"].get<std::size_t>();
    g.adjacency.assign(g.n, {});
    for (const auto& e : j.at("edges")) {
        const auto a = e.at(0).get<std::size_t>();
        const auto b = e.at(1).get<std::size_t>();
        g.adjacency[a].push_back(b);
        g.adjacency[b].push_back(a);
    }
    for (auto& a : g.adjacency) std::sort(a.begin(), a.end());
    return g;
}

}  // namespace sttis
