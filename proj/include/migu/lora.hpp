#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "migu/error.hpp"
#include "migu/layers.hpp"
#include "migu/masking.hpp"
#include "migu/matrix.hpp"
#include "migu/rng.hpp"

namespace migu {

// Low-rank adapter pair on a frozen base weight: y += (alpha/r) * x*A*B.
// B starts at zero so a fresh adapter contributes nothing. A's columns are
// masked by |x_A| magnitudes; B's columns by the magnitudes of the combined
// layer output x_O.
template <typename T>
struct LoraAdapter {
    std::string name;
    Matrix<T> a;  // d_in x r
    Matrix<T> b;  // r x d_out
    Matrix<T> grad_a;
    Matrix<T> grad_b;
    double alpha = 32.0;
    std::size_t rank = 8;
    double dropout = 0.0;
    bool frozen = false;  // stacked adapters from earlier tasks

    MagnitudeCache cache_xa;  // length r
    MagnitudeCache cache_xo;  // length d_out

    Matrix<T> cached_x;
    Matrix<T> cached_xa;          // post-dropout x_A consumed by dB
    Matrix<T> cached_drop_scale;  // elementwise 0 or 1/(1-p); empty when dropout off
    bool has_cache = false;

    LoraAdapter() = default;

    LoraAdapter(std::string adapter_name, std::size_t d_in, std::size_t d_out, std::size_t r,
                double alpha_scale)
        : name(std::move(adapter_name)),
          a(d_in, r),
          b(r, d_out),
          grad_a(d_in, r),
          grad_b(r, d_out),
          alpha(alpha_scale),
          rank(r) {
        if (r < 1 || r > std::min(d_in, d_out)) {
            throw ConfigError("lora '" + name + "': rank " + std::to_string(r) +
                              " must lie in [1, min(d_in,d_out)=" + std::to_string(std::min(d_in, d_out)) + "]");
        }
    }

    void init(Rng& rng, double a_stddev = 0.02) {
        a = Matrix<T>::randn(a.rows(), a.cols(), rng, a_stddev);
        b.fill(T(0));
    }

    T scaling() const { return static_cast<T>(alpha / static_cast<double>(rank)); }

    void zero_grads() {
        grad_a.fill(T(0));
        grad_b.fill(T(0));
    }
};

// Combined forward through a base linear plus its adapter stack.
// Pre-bias x_O = x*W + sum_k (alpha/r) * x*A_k*B_k feeds the magnitude caches
// (both the base layer's, when instrumented, and every active adapter's
// cache_xo); bias is added afterwards.
template <typename T>
Matrix<T> lora_forward(LinearLayer<T>& base, std::vector<LoraAdapter<T>>& stack, const Matrix<T>& x,
                       Pass pass = Pass::infer, long long step = -1, Rng* dropout_rng = nullptr) {
    if (x.cols() != base.d_in()) {
        throw ShapeError("lora_forward '" + base.name + "': input " + x.shape_str() +
                         " does not match weight " + base.weight.shape_str());
    }
    Matrix<T> y = matmul(x, base.weight);

    for (LoraAdapter<T>& adapter : stack) {
        Matrix<T> xa = matmul(x, adapter.a);
        if (!adapter.frozen && pass != Pass::infer) {
            adapter.cache_xa = magnitude_mean(xa, step);
        }
        Matrix<T> drop_scale;
        if (!adapter.frozen && pass == Pass::train && adapter.dropout > 0.0 && dropout_rng) {
            drop_scale = Matrix<T>(xa.rows(), xa.cols());
            const T inv_keep = T(1) / static_cast<T>(1.0 - adapter.dropout);
            for (auto& s : drop_scale.storage()) {
                s = dropout_rng->bernoulli(adapter.dropout) ? T(0) : inv_keep;
            }
            xa = hadamard(xa, drop_scale);
        }
        add_inplace(y, scale(matmul(xa, adapter.b), adapter.scaling()));
        if (!adapter.frozen && pass == Pass::train) {
            adapter.cached_x = x;
            adapter.cached_xa = xa;
            adapter.cached_drop_scale = std::move(drop_scale);
            adapter.has_cache = true;
        }
    }

    if (pass != Pass::infer) {
        MagnitudeCache xo_cache = magnitude_mean(y, step);
        for (LoraAdapter<T>& adapter : stack) {
            if (!adapter.frozen) adapter.cache_xo = xo_cache;
        }
        if (base.instrumented) base.cache = std::move(xo_cache);
    }
    add_row_broadcast(y, base.bias);
    return y;
}

// Gradients of the adapter pair; the base weight receives none. Frozen
// adapters and the base still propagate dX to earlier layers.
template <typename T>
Matrix<T> lora_backward(const LinearLayer<T>& base, std::vector<LoraAdapter<T>>& stack,
                        const Matrix<T>& dy) {
    Matrix<T> dx = matmul(dy, transpose(base.weight));
    for (LoraAdapter<T>& adapter : stack) {
        if (adapter.frozen) {
            Matrix<T> d_xa = scale(matmul(dy, transpose(adapter.b)), adapter.scaling());
            add_inplace(dx, matmul(d_xa, transpose(adapter.a)));
            continue;
        }
        if (!adapter.has_cache) {
            throw StateError("lora '" + adapter.name + "': backward without cached forward");
        }
        const Matrix<T> dy_scaled = scale(dy, adapter.scaling());
        add_inplace(adapter.grad_b, matmul(transpose(adapter.cached_xa), dy_scaled));
        Matrix<T> d_xa = matmul(dy_scaled, transpose(adapter.b));
        if (!adapter.cached_drop_scale.empty()) {
            d_xa = hadamard(d_xa, adapter.cached_drop_scale);
        }
        add_inplace(adapter.grad_a, matmul(transpose(adapter.cached_x), d_xa));
        add_inplace(dx, matmul(d_xa, transpose(adapter.a)));
    }
    return dx;
}

// MIGU masks for one adapter: A from its own |x_A| cache, B from the |x_O|
// cache of the whole layer output.
template <typename T>
std::pair<GradMask, GradMask> lora_migu_masks(const LoraAdapter<T>& adapter, double threshold_ratio,
                                              long long current_step) {
    if (!adapter.cache_xa.fresh_for(current_step) || !adapter.cache_xo.fresh_for(current_step)) {
        throw StateError("lora '" + adapter.name + "': magnitude caches are stale for step " +
                         std::to_string(current_step));
    }
    return {binary_top_t(adapter.cache_xa, threshold_ratio),
            binary_top_t(adapter.cache_xo, threshold_ratio)};
}

}  // namespace migu
