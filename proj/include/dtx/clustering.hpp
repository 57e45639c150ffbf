#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtx/core.hpp"

namespace dtx {

struct KMeansResult {
    Mat centroids;                  // k x D
    std::vector<int> assignment;    // length N, each < k
    double inertia = 0.0;           // sum of squared point-to-centroid distances
    std::vector<double> inertia_trace;  // per-Lloyd-iteration, non-increasing
};

struct KMeansOptions {
    int max_iters = 100;
    double tol = 1e-4;         // relative inertia improvement threshold
    bool normalize = false;    // L2-normalize points before clustering
    int threads = 1;
};

KMeansResult kmeans_fit(const Mat& points, int k, uint64_t seed,
                        const KMeansOptions& opt = {});

struct ClusterTree {
    std::vector<KMeansResult> levels;  // level 0 on raw points, higher on centroids
    std::vector<int> ks;

    size_t n_points() const {
        return levels.empty() ? 0 : levels[0].assignment.size();
    }
    int n_levels() const { return static_cast<int>(levels.size()); }
};

ClusterTree hierarchical_fit(const Mat& points, const std::vector<int>& ks,
                             uint64_t seed, const KMeansOptions& opt = {});

// Cluster index of every raw point at the requested level, composing
// assignments upward through the hierarchy.
std::vector<int> compose_assignment(const ClusterTree& tree, int level);

// Recursive water-filling sampler: splits the budget evenly across non-empty
// top-level clusters, redistributes surplus from clusters smaller than their
// quota, recurses down the hierarchy, and draws uniformly at level 0.
// Returns exactly min(budget, N) distinct point indices, sorted ascending.
std::vector<size_t> balanced_sample(const ClusterTree& tree, size_t budget,
                                    uint64_t seed);

// Budget allocation helper (exposed for tests): fills `budget` units into
// bins with the given capacities as evenly as possible.
std::vector<size_t> water_fill(size_t budget, const std::vector<size_t>& caps);

void write_cluster_tree(const ClusterTree& tree, const std::string& path);
ClusterTree read_cluster_tree(const std::string& path);

}  // namespace dtx
