#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <vector>

#include "migu/adamw.hpp"
#include "migu/masking.hpp"
#include "migu/matrix.hpp"
#include "migu/rng.hpp"

using namespace migu;

namespace {

// Brute-force oracle: full sort by (value desc, index asc), keep the first
// d_out - floor(T*d_out). Kept independent of the library implementation.
std::vector<std::uint8_t> brute_force_keep(const std::vector<double>& n, double threshold) {
    const std::size_t d = n.size();
    const std::size_t t = static_cast<std::size_t>(std::floor(threshold * static_cast<double>(d)));
    std::vector<std::size_t> idx(d);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&n](std::size_t a, std::size_t b) {
        if (n[a] != n[b]) return n[a] > n[b];
        return a < b;
    });
    std::vector<std::uint8_t> keep(d, 0);
    for (std::size_t i = 0; i < d - t; ++i) keep[idx[i]] = 1;
    return keep;
}

std::vector<double> random_distinct(Rng& rng, std::size_t len) {
    std::vector<double> n(len);
    for (;;) {
        for (auto& v : n) v = rng.uniform(0.0, 10.0);
        std::vector<double> sorted = n;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end()) return n;
    }
}

}  // namespace

TEST(CacheMagnitudes, SingleTokenAbsolute) {
    const Matrix<float> h{{2.0f, -3.0f}};
    const auto cache = magnitude_mean(h);
    EXPECT_DOUBLE_EQ(cache.n[0], 2.0);
    EXPECT_DOUBLE_EQ(cache.n[1], 3.0);
    EXPECT_EQ(cache.token_count, 1u);
}

TEST(CacheMagnitudes, TwoTokenMeanOfAbsoluteValues) {
    const Matrix<float> h{{1.0f, -1.0f}, {3.0f, 1.0f}};
    const auto cache = magnitude_mean(h);
    EXPECT_DOUBLE_EQ(cache.n[0], 2.0);
    EXPECT_DOUBLE_EQ(cache.n[1], 1.0);
    EXPECT_EQ(cache.token_count, 2u);
}

TEST(CacheMagnitudes, ZeroActivationsGiveZeroDistribution) {
    const auto cache = magnitude_mean(Matrix<float>(5, 3, 0.0f));
    for (double v : cache.n) EXPECT_EQ(v, 0.0);
}

TEST(CacheMagnitudes, EmptyBatchRejected) {
    EXPECT_THROW(magnitude_mean(Matrix<float>(0, 4)), StateError);
    EXPECT_THROW(magnitude_rows(Matrix<float>(0, 4)), StateError);
}

TEST(CacheMagnitudes, PerSampleModeYieldsOneCachePerRow) {
    const Matrix<float> h{{1.0f, -1.0f}, {3.0f, 1.0f}};
    const auto caches = cache_magnitudes(h, Granularity::per_sample);
    ASSERT_EQ(caches.size(), 2u);
    EXPECT_DOUBLE_EQ(caches[0].n[0], 1.0);
    EXPECT_DOUBLE_EQ(caches[0].n[1], 1.0);
    EXPECT_DOUBLE_EQ(caches[1].n[0], 3.0);
    EXPECT_DOUBLE_EQ(caches[1].n[1], 1.0);
}

TEST(BinaryTopT, HandDerivedHalfMask) {
    const auto mask = binary_top_t({0.5, 0.1, 0.3, 0.05}, 0.5);
    EXPECT_EQ(mask.masked_count, 2u);
    const std::vector<std::uint8_t> expected{1, 0, 1, 0};
    EXPECT_EQ(mask.keep, expected);
}

TEST(BinaryTopT, ZeroThresholdKeepsEverything) {
    const auto mask = binary_top_t({0.4, 0.2, 0.9}, 0.0);
    EXPECT_EQ(mask.kept_count(), 3u);
    EXPECT_EQ(mask.masked_count, 0u);
}

TEST(BinaryTopT, FullThresholdMasksEverything) {
    const auto mask = binary_top_t({0.4, 0.2, 0.9}, 1.0);
    EXPECT_EQ(mask.kept_count(), 0u);
    EXPECT_EQ(mask.masked_count, 3u);
}

TEST(BinaryTopT, TiesKeepLowerIndexFirst) {
    const auto mask = binary_top_t({0.5, 0.5, 0.5, 0.5}, 0.5);
    const std::vector<std::uint8_t> expected{1, 1, 0, 0};
    EXPECT_EQ(mask.keep, expected);
}

TEST(BinaryTopT, RejectsBadInputs) {
    EXPECT_THROW(binary_top_t({0.1, 0.2}, -0.1), ConfigError);
    EXPECT_THROW(binary_top_t({0.1, 0.2}, 1.5), ConfigError);
    EXPECT_THROW(binary_top_t({-0.1, 0.2}, 0.5), NumericError);
    EXPECT_THROW(binary_top_t({std::numeric_limits<double>::quiet_NaN(), 0.2}, 0.5), NumericError);
}

TEST(BinaryTopT, MatchesBruteForceOracleExhaustively) {
    Rng rng(2024);
    const std::vector<double> thresholds{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    for (int draw = 0; draw < 1000; ++draw) {
        const std::size_t len = 1 + rng.uniform_below(8);
        const auto n = random_distinct(rng, len);
        for (double t : thresholds) {
            const auto mask = binary_top_t(n, t);
            EXPECT_EQ(mask.keep, brute_force_keep(n, t)) << "len=" << len << " T=" << t;
        }
    }
}

TEST(BinaryTopT, CardinalityAlwaysExact) {
    Rng rng(31);
    for (int draw = 0; draw < 300; ++draw) {
        const std::size_t len = 1 + rng.uniform_below(32);
        std::vector<double> n(len);
        for (auto& v : n) v = rng.uniform(0.0, 5.0);
        const double t = rng.uniform(0.0, 1.0);
        const auto mask = binary_top_t(n, t);
        const std::size_t masked = static_cast<std::size_t>(std::floor(t * static_cast<double>(len)));
        EXPECT_EQ(mask.kept_count(), len - masked);
        EXPECT_EQ(mask.masked_count, masked);
    }
}

TEST(BinaryTopT, ScaleInvariance) {
    Rng rng(32);
    for (int draw = 0; draw < 100; ++draw) {
        const std::size_t len = 1 + rng.uniform_below(16);
        const auto n = random_distinct(rng, len);
        const double c = std::exp(rng.uniform(-6.0, 6.0));
        const double t = rng.uniform(0.0, 1.0);
        std::vector<double> scaled(len);
        for (std::size_t i = 0; i < len; ++i) scaled[i] = c * n[i];
        EXPECT_EQ(binary_top_t(scaled, t).keep, binary_top_t(n, t).keep);
    }
}

TEST(BinaryTopT, MonotonicityOfKeptSets) {
    Rng rng(33);
    for (int draw = 0; draw < 200; ++draw) {
        const std::size_t len = 2 + rng.uniform_below(12);
        const auto n = random_distinct(rng, len);
        double t1 = rng.uniform(0.0, 1.0), t2 = rng.uniform(0.0, 1.0);
        if (t1 > t2) std::swap(t1, t2);
        const auto keep_low = binary_top_t(n, t1).keep;
        const auto keep_high = binary_top_t(n, t2).keep;
        for (std::size_t j = 0; j < len; ++j) {
            if (keep_high[j]) EXPECT_TRUE(keep_low[j]) << "kept at T2 but not at T1, col " << j;
        }
    }
}

TEST(NormalizeDistribution, SumsToOneAndPreservesMask) {
    Rng rng(34);
    const auto n = random_distinct(rng, 10);
    const auto norm = normalize_distribution(n);
    double total = 0.0;
    for (double v : norm) total += v;
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_EQ(binary_top_t(norm, 0.7).keep, binary_top_t(n, 0.7).keep);
}

// --- masked AdamW column updates ---

TEST(MaskedUpdate, PlainSgdHandExample) {
    // Eq.-literal SGD mode: W - eta * (M .* grad), keep = [1, 0]
    Matrix<double> w{{1, 2}, {3, 4}};
    const Matrix<double> grad{{1, 1}, {1, 1}};
    const std::vector<std::uint8_t> keep{1, 0};
    const double eta = 0.1;
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            if (keep[j]) w(i, j) -= eta * grad(i, j);
        }
    }
    EXPECT_DOUBLE_EQ(w(0, 0), 0.9);
    EXPECT_DOUBLE_EQ(w(0, 1), 2.0);
    EXPECT_DOUBLE_EQ(w(1, 0), 2.9);
    EXPECT_DOUBLE_EQ(w(1, 1), 4.0);
}

TEST(MaskedUpdate, AllKeepMatchesUnmaskedBitwise) {
    Rng rng(35);
    Matrix<float> a = Matrix<float>::randn(6, 8, rng, 0.5);
    Matrix<float> b = a;
    OptimState<float> sa(6, 8), sb(6, 8);
    const std::vector<std::uint8_t> keep(8, 1);
    AdamwHyper hyper;
    for (int step = 0; step < 7; ++step) {
        const Matrix<float> grad = Matrix<float>::randn(6, 8, rng, 0.3);
        adamw_step(a, grad, sa, hyper);
        adamw_step(b, grad, sb, hyper, &keep);
    }
    EXPECT_EQ(a, b);
    EXPECT_EQ(sa.m, sb.m);
    EXPECT_EQ(sa.v, sb.v);
}

TEST(MaskedUpdate, AllMaskedLeavesEverythingBitwise) {
    Rng rng(36);
    Matrix<float> param = Matrix<float>::randn(5, 4, rng, 0.5);
    OptimState<float> state(5, 4);
    state.m = Matrix<float>::randn(5, 4, rng, 0.1);
    state.v = Matrix<float>::randn(5, 4, rng, 0.01);
    for (auto& v : state.v.storage()) v = std::abs(v);
    const Matrix<float> before = param;
    const OptimState<float> state_before = state;
    const std::vector<std::uint8_t> keep(4, 0);
    const Matrix<float> grad = Matrix<float>::randn(5, 4, rng, 1.0);
    adamw_step(param, grad, state, AdamwHyper{}, &keep);
    EXPECT_EQ(param, before);
    EXPECT_EQ(state.m, state_before.m);
    EXPECT_EQ(state.v, state_before.v);
}

TEST(MaskedUpdate, FreezeGuaranteeFuzzed) {
    Rng rng(37);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d_in = 1 + rng.uniform_below(12);
        const std::size_t d_out = 1 + rng.uniform_below(12);
        Matrix<float> w = Matrix<float>::randn(d_in, d_out, rng, 0.4);
        Matrix<float> bias = Matrix<float>::randn(1, d_out, rng, 0.4);
        OptimState<float> ws(d_in, d_out), bs(1, d_out);
        AdamwHyper hyper;
        hyper.weight_decay = rng.bernoulli(0.5) ? 0.01 : 0.0;

        // a few warmup steps so moments are nonzero
        const int warmup = static_cast<int>(rng.uniform_below(4));
        for (int s = 0; s < warmup; ++s) {
            adamw_step(w, Matrix<float>::randn(d_in, d_out, rng, 0.2), ws, hyper);
            adamw_step(bias, Matrix<float>::randn(1, d_out, rng, 0.2), bs, hyper);
        }

        std::vector<double> n(d_out);
        for (auto& v : n) v = rng.uniform(0.0, 2.0);
        const auto mask = binary_top_t(n, rng.uniform(0.0, 1.0));

        const Matrix<float> w_before = w, b_before = bias;
        const Matrix<float> wm_before = ws.m, wv_before = ws.v;
        const Matrix<float> bm_before = bs.m, bv_before = bs.v;

        adamw_step(w, Matrix<float>::randn(d_in, d_out, rng, 0.5), ws, hyper, &mask.keep);
        adamw_step(bias, Matrix<float>::randn(1, d_out, rng, 0.5), bs, hyper, &mask.keep);

        for (std::size_t j = 0; j < d_out; ++j) {
            if (mask.keep[j]) continue;
            EXPECT_EQ(bias(0, j), b_before(0, j));
            EXPECT_EQ(bs.m(0, j), bm_before(0, j));
            EXPECT_EQ(bs.v(0, j), bv_before(0, j));
            for (std::size_t i = 0; i < d_in; ++i) {
                EXPECT_EQ(w(i, j), w_before(i, j));
                EXPECT_EQ(ws.m(i, j), wm_before(i, j));
                EXPECT_EQ(ws.v(i, j), wv_before(i, j));
            }
        }
    }
}

TEST(MaskedUpdate, DecayMaskedFlagAppliesDecayToFrozenColumns) {
    Matrix<float> param(2, 2, 1.0f);
    OptimState<float> state(2, 2);
    AdamwHyper hyper;
    hyper.learning_rate = 0.1;
    hyper.weight_decay = 0.5;
    const std::vector<std::uint8_t> keep{0, 0};
    adamw_step(param, Matrix<float>(2, 2, 1.0f), state, hyper, &keep, /*decay_masked=*/true);
    for (const auto& v : param.storage()) EXPECT_FLOAT_EQ(v, 0.95f);
    for (const auto& v : state.m.storage()) EXPECT_EQ(v, 0.0f);
}
