#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "migu/error.hpp"
#include "migu/masking.hpp"
#include "migu/matrix.hpp"
#include "migu/rng.hpp"

namespace migu {

enum class ClusterStrategy { weight_cluster, co_magnitude };

inline const char* to_string(ClusterStrategy s) {
    return s == ClusterStrategy::weight_cluster ? "weight_cluster" : "co_magnitude";
}

struct ClusterConfig {
    std::size_t n_clusters = 4;
    ClusterStrategy strategy = ClusterStrategy::weight_cluster;
    std::size_t probe_size = 32;   // sample rows consumed by the co-magnitude strategy
    std::size_t kmeans_max_iters = 50;
    std::uint64_t kmeans_seed = 0;
};

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        d += diff * diff;
    }
    return d;
}

// Lloyd's k-means with seeded init. An empty cluster is re-seeded with the
// point farthest from its assigned centroid, at most 10 times.
inline std::vector<std::size_t> kmeans(const std::vector<std::vector<double>>& points, std::size_t k,
                                       std::size_t max_iters, std::uint64_t seed) {
    const std::size_t n = points.size();
    Rng rng(derive_seed(seed, 0x6b6d65616e73ull));

    // distinct random points as initial centroids
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    rng.shuffle(pool);
    std::vector<std::vector<double>> centroids;
    centroids.reserve(k);
    for (std::size_t c = 0; c < k; ++c) centroids.push_back(points[pool[c]]);

    std::vector<std::size_t> assignment(n, 0);
    int reseeds = 0;
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::max();
            for (std::size_t c = 0; c < k; ++c) {
                const double d = sq_dist(points[i], centroids[c]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (assignment[i] != best) {
                assignment[i] = best;
                changed = true;
            }
        }

        std::vector<std::size_t> counts(k, 0);
        std::vector<std::vector<double>> sums(k, std::vector<double>(points[0].size(), 0.0));
        for (std::size_t i = 0; i < n; ++i) {
            counts[assignment[i]] += 1;
            for (std::size_t d = 0; d < points[i].size(); ++d) sums[assignment[i]][d] += points[i][d];
        }

        bool reseeded = false;
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                for (std::size_t d = 0; d < sums[c].size(); ++d) {
                    centroids[c][d] = sums[c][d] / static_cast<double>(counts[c]);
                }
            } else if (reseeds < 10) {
                std::size_t farthest = 0;
                double worst = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = sq_dist(points[i], centroids[assignment[i]]);
                    if (d > worst) {
                        worst = d;
                        farthest = i;
                    }
                }
                centroids[c] = points[farthest];
                ++reseeds;
                reseeded = true;
            }
        }
        if (!changed && !reseeded) break;
    }
    return assignment;
}

}  // namespace detail

// Assign every weight column of a d_in x d_out matrix to one of N clusters,
// either by proximity in weight space or by similarity of per-column
// magnitude profiles over a probe batch.
template <typename T>
std::vector<std::size_t> cluster_weights(const Matrix<T>& weight, const ClusterConfig& cfg,
                                         const Matrix<T>* probe = nullptr) {
    const std::size_t d_out = weight.cols();
    if (cfg.n_clusters < 1 || cfg.n_clusters > d_out) {
        throw ConfigError("cluster_weights: N=" + std::to_string(cfg.n_clusters) +
                          " must lie in [1, " + std::to_string(d_out) + "]");
    }

    std::vector<std::vector<double>> points(d_out);
    if (cfg.strategy == ClusterStrategy::weight_cluster) {
        for (std::size_t j = 0; j < d_out; ++j) {
            points[j].resize(weight.rows());
            for (std::size_t i = 0; i < weight.rows(); ++i) {
                points[j][i] = static_cast<double>(weight(i, j));
            }
        }
    } else {
        if (!probe) throw ConfigError("cluster_weights: co-magnitude strategy requires a probe batch");
        if (probe->rows() < cfg.probe_size) {
            throw ConfigError("cluster_weights: probe has " + std::to_string(probe->rows()) +
                              " rows, need at least " + std::to_string(cfg.probe_size));
        }
        // per-column |h| profile over the first probe_size rows
        Matrix<T> h = matmul(*probe, weight);
        for (std::size_t j = 0; j < d_out; ++j) {
            points[j].resize(cfg.probe_size);
            for (std::size_t s = 0; s < cfg.probe_size; ++s) {
                points[j][s] = std::abs(static_cast<double>(h(s, j)));
            }
        }
    }
    return detail::kmeans(points, cfg.n_clusters, cfg.kmeans_max_iters, cfg.kmeans_seed);
}

// Cluster-uniform keep mask: rank clusters by mean magnitude, keep whole
// clusters while they fit the d_out - floor(T*d_out) column budget. The top
// cluster is always kept when the budget is nonzero, since a cluster cannot
// be kept partially.
inline GradMask cluster_mask(const std::vector<double>& n, const std::vector<std::size_t>& assignment,
                             double threshold_ratio) {
    if (assignment.size() != n.size()) {
        throw ShapeError("cluster_mask: assignment length " + std::to_string(assignment.size()) +
                         " vs magnitudes " + std::to_string(n.size()));
    }
    const std::size_t d_out = n.size();
    const std::size_t t = static_cast<std::size_t>(std::floor(threshold_ratio * static_cast<double>(d_out)));
    const std::size_t budget = d_out - t;

    const std::size_t n_clusters = 1 + *std::max_element(assignment.begin(), assignment.end());
    std::vector<double> score(n_clusters, 0.0);
    std::vector<std::size_t> member_count(n_clusters, 0);
    std::vector<std::size_t> first_member(n_clusters, d_out);
    for (std::size_t j = 0; j < d_out; ++j) {
        const std::size_t c = assignment[j];
        score[c] += n[j];
        member_count[c] += 1;
        first_member[c] = std::min(first_member[c], j);
    }
    for (std::size_t c = 0; c < n_clusters; ++c) {
        if (member_count[c] > 0) score[c] /= static_cast<double>(member_count[c]);
    }

    std::vector<std::size_t> order;
    for (std::size_t c = 0; c < n_clusters; ++c) {
        if (member_count[c] > 0) order.push_back(c);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (score[a] != score[b]) return score[a] > score[b];
        return first_member[a] < first_member[b];
    });

    GradMask mask;
    mask.keep.assign(d_out, 0);
    std::size_t kept = 0;
    for (std::size_t c : order) {
        if (budget == 0) break;
        if (kept > 0 && kept + member_count[c] > budget) break;
        for (std::size_t j = 0; j < d_out; ++j) {
            if (assignment[j] == c) mask.keep[j] = 1;
        }
        kept += member_count[c];
        if (kept >= budget) break;
    }
    mask.masked_count = d_out - kept;
    return mask;
}

}  // namespace migu
