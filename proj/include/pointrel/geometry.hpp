#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pointrel/common.hpp"

namespace pointrel {

// ---------------------------------------------------------------------------
// Point cloud: N xyz rows, optional per-point labels, optional category.
// ---------------------------------------------------------------------------

struct PointCloud {
    std::size_t n = 0;
    std::vector<double> xyz;            // n*3 row-major
    std::vector<int> point_labels;      // size n, or empty when unlabeled
    int category = -1;                  // shape class, -1 when unknown

    const double* point(std::size_t i) const { return xyz.data() + i * 3; }
    double* point(std::size_t i) { return xyz.data() + i * 3; }
};

// N x k table of neighbor indices; row i starts with i itself and continues in
// non-decreasing distance order (ties by ascending point index).
struct NeighborIndex {
    std::size_t n = 0;
    std::size_t k = 0;
    std::vector<std::uint32_t> idx;  // n*k

    std::uint32_t at(std::size_t i, std::size_t j) const { return idx[i * k + j]; }
};

// ---------------------------------------------------------------------------
// Spatial primitives. All are pure functions; ties break by ascending index.
// ---------------------------------------------------------------------------

// Full N x N squared-distance matrix over 3-D coordinates: symmetric, zero
// diagonal, entries clamped to >= 0.
std::vector<double> pairwise_sq_dist(const std::vector<double>& xyz, std::size_t n);

// Brute-force k nearest neighbors over dim-dimensional rows. Row i is forced
// to begin with i (self-first convention); the remaining k-1 entries are the
// closest other points in (distance, index) order. 1 <= k <= n required.
NeighborIndex knn_general(const double* data, std::size_t n, std::size_t dim, std::size_t k);

inline NeighborIndex knn(const PointCloud& cloud, std::size_t k) {
    return knn_general(cloud.xyz.data(), cloud.n, 3, k);
}
inline NeighborIndex knn(const std::vector<double>& xyz, std::size_t n, std::size_t k) {
    return knn_general(xyz.data(), n, 3, k);
}

// k nearest neighbors of selected center points against the full 3-D set.
// Row i describes centers[i]: it is forced to begin with the center itself,
// then the k-1 closest other points in (distance, index) order. The returned
// table has centers.size() rows; entries index into the full point set.
NeighborIndex knn_subset(const std::vector<double>& xyz, std::size_t n,
                         const std::vector<std::uint32_t>& centers, std::size_t k);

// Greedy farthest-point sampling: starts at seed_index, then repeatedly takes
// the point maximizing the minimum distance to the chosen set (ties -> lowest
// index). 1 <= S <= n required.
std::vector<std::uint32_t> fps(const std::vector<double>& xyz, std::size_t n, std::size_t S,
                               std::size_t seed_index = 0);

// Inverse-squared-distance weights of a query against exactly 3 anchors
// (anchors row-major 3x3). Nonnegative, sum to 1. If any squared distance is
// below 1e-20 the result is one-hot on the nearest such anchor.
std::array<double, 3> idw_weights(const double* query, const double* anchors);

// ---------------------------------------------------------------------------
// XYZL text format: one point per line, "x y z [label]", '#' starts a
// comment, blank lines ignored. Non-finite values are rejected.
// ---------------------------------------------------------------------------

PointCloud load_xyzl(const std::string& path);
void save_xyzl(const PointCloud& cloud, const std::string& path);

}  // namespace pointrel
