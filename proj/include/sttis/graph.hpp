#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sttis/similarity.hpp"

namespace sttis {

// Region connected graph: hub nodes, their claimed children, and leftover
// nodes wired to every hub. Degree is O(sqrt(n)) and any two nodes are at
// distance <= 2.
struct RegionGraph {
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::vector<std::vector<std::size_t>> adjacency;  // sorted, no self-loops
    std::vector<std::size_t> hubs;                    // in selection order
    std::map<std::size_t, std::vector<std::size_t>> children;
    std::vector<std::size_t> leftovers;
    std::optional<std::size_t> star_hub;

    std::size_t num_edges() const;
    const std::vector<std::size_t>& neighbors(std::size_t i) const;

    std::string to_json() const;
    static RegionGraph from_json(const std::string& text);
};

struct ValidationReport {
    std::size_t n = 0;
    std::size_t num_edges = 0;
    std::size_t max_degree = 0;
    std::size_t degree_bound = 0;
    std::size_t diameter = 0;  // meaningful only when connected
    bool connected = false;
    bool degree_ok = false;
    bool diameter_ok = false;
    bool pass = false;

    std::string to_string() const;
};

// Degree bound from the construction: max(2*floor(sqrt(n))-2,
// n - floor(sqrt(n))^2 + floor(sqrt(n)) - 1).
std::size_t degree_bound(std::size_t n);

// Builds the sampled graph from a similarity matrix. Hubs are the
// floor(sqrt(n)) regions with the largest similarity sum; each hub claims
// the floor(sqrt(n))-1 most similar unclaimed non-hub regions in selection
// order. Ties break toward the lower region index. The seed only picks the
// star hub when sqrt(n) is integral.
RegionGraph build_graph(const SimilarityMatrix& sim, std::uint64_t seed);

// Complete-graph fallback for n < 4.
RegionGraph build_complete_graph(std::size_t n);

// Checks connectivity, diameter and the degree bound with plain BFS.
ValidationReport validate(const RegionGraph& g);

}  // namespace sttis
