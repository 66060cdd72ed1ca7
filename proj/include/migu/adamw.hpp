#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "migu/error.hpp"
#include "migu/masking.hpp"
#include "migu/matrix.hpp"

namespace migu {

struct AdamwHyper {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Per-parameter moments. The step counter advances once per update call;
// bias correction uses it for every kept column.
template <typename T>
struct OptimState {
    Matrix<T> m;
    Matrix<T> v;
    std::uint64_t step = 0;

    OptimState() = default;
    OptimState(std::size_t rows, std::size_t cols) : m(rows, cols), v(rows, cols) {}
};

// Decoupled-weight-decay Adam with bias correction, applied column-wise so
// that a keep mask can freeze whole output columns. A frozen column's weight,
// bias entry and both moment columns stay bit-identical: no gradient, no
// moment advance, and (unless decay_masked) no weight decay either. With
// keep == nullptr every column takes the same code path as a kept one, so a
// T=0 all-keep mask is bitwise equal to an unmasked step.
template <typename T>
void adamw_step(Matrix<T>& param, const Matrix<T>& grad, OptimState<T>& state, const AdamwHyper& hyper,
                const std::vector<std::uint8_t>* keep = nullptr, bool decay_masked = false) {
    if (!param.same_shape(grad)) {
        throw ShapeError("adamw_step: param " + param.shape_str() + " vs grad " + grad.shape_str());
    }
    if (!param.same_shape(state.m)) {
        throw ShapeError("adamw_step: optimizer state " + state.m.shape_str() + " does not match param " +
                         param.shape_str());
    }
    if (keep && keep->size() != param.cols()) {
        throw ShapeError("adamw_step: keep mask length " + std::to_string(keep->size()) +
                         " does not match " + std::to_string(param.cols()) + " columns");
    }
    if (!grad.all_finite()) throw NumericError("adamw_step: non-finite gradient entries");

    state.step += 1;
    const T lr = static_cast<T>(hyper.learning_rate);
    const T b1 = static_cast<T>(hyper.beta1);
    const T b2 = static_cast<T>(hyper.beta2);
    const T eps = static_cast<T>(hyper.eps);
    const T decay_factor = static_cast<T>(1.0 - hyper.learning_rate * hyper.weight_decay);
    const T bc1 = static_cast<T>(1.0 - std::pow(hyper.beta1, static_cast<double>(state.step)));
    const T bc2 = static_cast<T>(1.0 - std::pow(hyper.beta2, static_cast<double>(state.step)));

    const std::size_t rows = param.rows(), cols = param.cols();
    for (std::size_t j = 0; j < cols; ++j) {
        if (keep && !(*keep)[j]) {
            if (decay_masked) {
                for (std::size_t i = 0; i < rows; ++i) param(i, j) *= decay_factor;
            }
            continue;
        }
        for (std::size_t i = 0; i < rows; ++i) {
            const T g = grad(i, j);
            T& m = state.m(i, j);
            T& v = state.v(i, j);
            m = b1 * m + (T(1) - b1) * g;
            v = b2 * v + (T(1) - b2) * g * g;
            const T m_hat = m / bc1;
            const T v_hat = v / bc2;
            T& p = param(i, j);
            p *= decay_factor;
            p -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
}

}  // namespace migu
