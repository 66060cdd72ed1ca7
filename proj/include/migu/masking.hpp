#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "migu/error.hpp"
#include "migu/matrix.hpp"

namespace migu {

// How output magnitudes are aggregated before masking: one mask per batch
// (mean of |h| over all tokens) or one mask per sample row.
enum class Granularity { per_batch, per_sample };

inline const char* to_string(Granularity g) {
    return g == Granularity::per_batch ? "per_batch" : "per_sample";
}

// Per-column mean absolute pre-bias output, cached by the forward pass and
// consumed by the masking step of the same training step.
struct MagnitudeCache {
    std::vector<double> n;          // length d_out, entries >= 0
    std::size_t token_count = 0;    // tokens averaged into n
    long long freshness = -1;       // step index of the producing forward pass

    bool fresh_for(long long step) const { return freshness == step; }
};

// Binary keep vector over output columns. keep[j] == 1 -> column j receives
// the full update; keep[j] == 0 -> column j is frozen this step.
struct GradMask {
    std::vector<std::uint8_t> keep;
    std::size_t masked_count = 0;   // t = floor(T * d_out)
    long long freshness = -1;

    std::size_t kept_count() const {
        return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t(1)));
    }
};

// Mean of |h_j| over token rows of the raw (pre-bias) layer output.
template <typename T>
MagnitudeCache magnitude_mean(const Matrix<T>& raw_outputs, long long freshness = -1) {
    if (raw_outputs.rows() == 0) throw StateError("magnitude_mean: empty batch");
    MagnitudeCache cache;
    cache.n.assign(raw_outputs.cols(), 0.0);
    for (std::size_t i = 0; i < raw_outputs.rows(); ++i) {
        const T* row = raw_outputs.row_ptr(i);
        for (std::size_t j = 0; j < raw_outputs.cols(); ++j) {
            cache.n[j] += std::abs(static_cast<double>(row[j]));
        }
    }
    const double inv = 1.0 / static_cast<double>(raw_outputs.rows());
    for (double& v : cache.n) v *= inv;
    cache.token_count = raw_outputs.rows();
    cache.freshness = freshness;
    return cache;
}

// One cache per sample row (token), |h_j| directly.
template <typename T>
std::vector<MagnitudeCache> magnitude_rows(const Matrix<T>& raw_outputs, long long freshness = -1) {
    if (raw_outputs.rows() == 0) throw StateError("magnitude_rows: empty batch");
    std::vector<MagnitudeCache> caches(raw_outputs.rows());
    for (std::size_t i = 0; i < raw_outputs.rows(); ++i) {
        MagnitudeCache& cache = caches[i];
        cache.n.resize(raw_outputs.cols());
        const T* row = raw_outputs.row_ptr(i);
        for (std::size_t j = 0; j < raw_outputs.cols(); ++j) {
            cache.n[j] = std::abs(static_cast<double>(row[j]));
        }
        cache.token_count = 1;
        cache.freshness = freshness;
    }
    return caches;
}

template <typename T>
std::vector<MagnitudeCache> cache_magnitudes(const Matrix<T>& raw_outputs, Granularity granularity,
                                             long long freshness = -1) {
    if (granularity == Granularity::per_batch) {
        return {magnitude_mean(raw_outputs, freshness)};
    }
    return magnitude_rows(raw_outputs, freshness);
}

// Keep the d_out - floor(T * d_out) largest-magnitude columns. Ties keep the
// lower column index. The mask depends only on the argsort of n, so any
// positive rescaling of n yields the same mask.
inline GradMask binary_top_t(const std::vector<double>& n, double threshold_ratio,
                             long long freshness = -1) {
    if (threshold_ratio < 0.0 || threshold_ratio > 1.0) {
        throw ConfigError("binary_top_t: threshold ratio must lie in [0,1], got " +
                          std::to_string(threshold_ratio));
    }
    for (double v : n) {
        if (!std::isfinite(v) || v < 0.0) {
            throw NumericError("binary_top_t: magnitudes must be finite and nonnegative");
        }
    }
    const std::size_t d_out = n.size();
    const std::size_t t = static_cast<std::size_t>(std::floor(threshold_ratio * static_cast<double>(d_out)));
    const std::size_t kept = d_out - t;

    std::vector<std::size_t> order(d_out);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&n](std::size_t a, std::size_t b) { return n[a] > n[b]; });

    GradMask mask;
    mask.keep.assign(d_out, 0);
    for (std::size_t i = 0; i < kept; ++i) mask.keep[order[i]] = 1;
    mask.masked_count = t;
    mask.freshness = freshness;
    return mask;
}

inline GradMask binary_top_t(const MagnitudeCache& cache, double threshold_ratio) {
    return binary_top_t(cache.n, threshold_ratio, cache.freshness);
}

// Sum-to-1 normalization for exported distributions. Reporting only: masking
// uses raw averaged magnitudes (the mask is scale invariant either way).
inline std::vector<double> normalize_distribution(const std::vector<double>& n) {
    double total = 0.0;
    for (double v : n) total += v;
    std::vector<double> out(n.size(), 0.0);
    if (total > 0.0) {
        for (std::size_t i = 0; i < n.size(); ++i) out[i] = n[i] / total;
    }
    return out;
}

}  // namespace migu
