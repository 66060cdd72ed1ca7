#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "migu/error.hpp"
#include "migu/masking.hpp"
#include "migu/matrix.hpp"

namespace migu {

// What a forward pass may write:
//   train -> backward caches + magnitude cache (when instrumented)
//   infer -> nothing (evaluation must not disturb training state)
//   probe -> magnitude cache only (analysis-time mask extraction)
enum class Pass { train, infer, probe };

// Fully-connected layer. Weight columns are the unit of masking; the
// magnitude cache is filled from the pre-bias product X*W.
template <typename T>
struct LinearLayer {
    std::string name;
    Matrix<T> weight;      // d_in x d_out
    Matrix<T> bias;        // 1 x d_out
    Matrix<T> grad_weight;
    Matrix<T> grad_bias;

    bool instrumented = false;
    MagnitudeCache cache;

    Matrix<T> cached_input;
    bool has_cache = false;

    LinearLayer() = default;

    LinearLayer(std::string layer_name, std::size_t d_in, std::size_t d_out)
        : name(std::move(layer_name)),
          weight(d_in, d_out),
          bias(1, d_out),
          grad_weight(d_in, d_out),
          grad_bias(1, d_out) {}

    std::size_t d_in() const { return weight.rows(); }
    std::size_t d_out() const { return weight.cols(); }

    void init(Rng& rng, double stddev) {
        weight = Matrix<T>::randn(weight.rows(), weight.cols(), rng, stddev);
        bias.fill(T(0));
    }

    Matrix<T> forward(const Matrix<T>& x, Pass pass = Pass::infer, long long step = -1) {
        if (x.cols() != d_in()) {
            throw ShapeError("linear '" + name + "': input " + x.shape_str() + " does not match weight " +
                             weight.shape_str());
        }
        Matrix<T> y = matmul(x, weight);
        if (instrumented && pass != Pass::infer) {
            cache = magnitude_mean(y, step);
        }
        if (pass == Pass::train) {
            cached_input = x;
            has_cache = true;
        }
        add_row_broadcast(y, bias);
        return y;
    }

    Matrix<T> backward(const Matrix<T>& dy) {
        if (!has_cache) throw StateError("linear '" + name + "': backward without cached forward input");
        if (dy.rows() != cached_input.rows() || dy.cols() != d_out()) {
            throw ShapeError("linear '" + name + "': dY " + dy.shape_str() + " does not match forward output");
        }
        add_inplace(grad_weight, matmul(transpose(cached_input), dy));
        add_inplace(grad_bias, col_sums(dy));
        return matmul(dy, transpose(weight));
    }

    void zero_grads() {
        grad_weight.fill(T(0));
        grad_bias.fill(T(0));
    }
};

template <typename T>
struct ReluLayer {
    Matrix<T> cached_input;
    bool has_cache = false;

    Matrix<T> forward(const Matrix<T>& x, Pass pass = Pass::infer) {
        if (pass == Pass::train) {
            cached_input = x;
            has_cache = true;
        }
        Matrix<T> y(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) {
            y.storage()[i] = x.storage()[i] > T(0) ? x.storage()[i] : T(0);
        }
        return y;
    }

    Matrix<T> backward(const Matrix<T>& dy) const {
        if (!has_cache) throw StateError("relu: backward without cached forward input");
        Matrix<T> dx(dy.rows(), dy.cols());
        for (std::size_t i = 0; i < dy.size(); ++i) {
            dx.storage()[i] = cached_input.storage()[i] > T(0) ? dy.storage()[i] : T(0);
        }
        return dx;
    }
};

namespace detail {
inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }
inline double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;  // 1/sqrt(2*pi)
    return cdf + x * pdf;
}
}  // namespace detail

// Exact (erf-based) GeLU.
template <typename T>
struct GeluLayer {
    Matrix<T> cached_input;
    bool has_cache = false;

    Matrix<T> forward(const Matrix<T>& x, Pass pass = Pass::infer) {
        if (pass == Pass::train) {
            cached_input = x;
            has_cache = true;
        }
        Matrix<T> y(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) {
            y.storage()[i] = static_cast<T>(detail::gelu_scalar(static_cast<double>(x.storage()[i])));
        }
        return y;
    }

    Matrix<T> backward(const Matrix<T>& dy) const {
        if (!has_cache) throw StateError("gelu: backward without cached forward input");
        Matrix<T> dx(dy.rows(), dy.cols());
        for (std::size_t i = 0; i < dy.size(); ++i) {
            dx.storage()[i] = dy.storage()[i] *
                              static_cast<T>(detail::gelu_grad_scalar(static_cast<double>(cached_input.storage()[i])));
        }
        return dx;
    }
};

// Per-row layer normalization with learned gain/offset.
template <typename T>
struct LayerNorm {
    std::string name;
    Matrix<T> gamma;  // 1 x d
    Matrix<T> beta;   // 1 x d
    Matrix<T> grad_gamma;
    Matrix<T> grad_beta;
    T eps = T(1e-5);

    Matrix<T> cached_norm;     // x-hat rows
    std::vector<T> inv_std;    // per row
    bool has_cache = false;

    LayerNorm() = default;

    LayerNorm(std::string ln_name, std::size_t d)
        : name(std::move(ln_name)), gamma(1, d, T(1)), beta(1, d, T(0)), grad_gamma(1, d), grad_beta(1, d) {}

    std::size_t dim() const { return gamma.cols(); }

    Matrix<T> forward(const Matrix<T>& x, Pass pass = Pass::infer) {
        if (x.cols() != dim()) {
            throw ShapeError("layer_norm '" + name + "': input " + x.shape_str() + " does not match dim " +
                             std::to_string(dim()));
        }
        Matrix<T> y(x.rows(), x.cols());
        Matrix<T> norm(x.rows(), x.cols());
        std::vector<T> inv(x.rows());
        const T d = static_cast<T>(x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i) {
            const T* row = x.row_ptr(i);
            T mean = T(0);
            for (std::size_t j = 0; j < x.cols(); ++j) mean += row[j];
            mean /= d;
            T var = T(0);
            for (std::size_t j = 0; j < x.cols(); ++j) {
                const T c = row[j] - mean;
                var += c * c;
            }
            var /= d;
            const T istd = T(1) / std::sqrt(var + eps);
            inv[i] = istd;
            for (std::size_t j = 0; j < x.cols(); ++j) {
                const T xhat = (row[j] - mean) * istd;
                norm(i, j) = xhat;
                y(i, j) = gamma(0, j) * xhat + beta(0, j);
            }
        }
        if (pass == Pass::train) {
            cached_norm = norm;
            inv_std = std::move(inv);
            has_cache = true;
        }
        return y;
    }

    Matrix<T> backward(const Matrix<T>& dy) {
        if (!has_cache) throw StateError("layer_norm '" + name + "': backward without cached forward");
        Matrix<T> dx(dy.rows(), dy.cols());
        const T d = static_cast<T>(dy.cols());
        for (std::size_t i = 0; i < dy.rows(); ++i) {
            T sum_dxhat = T(0);
            T sum_dxhat_xhat = T(0);
            for (std::size_t j = 0; j < dy.cols(); ++j) {
                const T dxhat = dy(i, j) * gamma(0, j);
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * cached_norm(i, j);
                grad_gamma(0, j) += dy(i, j) * cached_norm(i, j);
                grad_beta(0, j) += dy(i, j);
            }
            const T mean_dxhat = sum_dxhat / d;
            const T mean_dxhat_xhat = sum_dxhat_xhat / d;
            for (std::size_t j = 0; j < dy.cols(); ++j) {
                const T dxhat = dy(i, j) * gamma(0, j);
                dx(i, j) = (dxhat - mean_dxhat - cached_norm(i, j) * mean_dxhat_xhat) * inv_std[i];
            }
        }
        return dx;
    }

    void zero_grads() {
        grad_gamma.fill(T(0));
        grad_beta.fill(T(0));
    }
};

// Token id -> row lookup.
template <typename T>
struct Embedding {
    std::string name;
    Matrix<T> table;  // vocab x d
    Matrix<T> grad_table;

    std::vector<std::int32_t> cached_ids;
    bool has_cache = false;

    Embedding() = default;

    Embedding(std::string emb_name, std::size_t vocab, std::size_t d)
        : name(std::move(emb_name)), table(vocab, d), grad_table(vocab, d) {}

    Matrix<T> forward(const std::vector<std::int32_t>& ids, Pass pass = Pass::infer) {
        Matrix<T> out(ids.size(), table.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const std::int32_t id = ids[i];
            if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
                throw ConfigError("embedding '" + name + "': token id " + std::to_string(id) +
                                  " outside vocab of " + std::to_string(table.rows()));
            }
            const T* src = table.row_ptr(static_cast<std::size_t>(id));
            T* dst = out.row_ptr(i);
            for (std::size_t j = 0; j < table.cols(); ++j) dst[j] = src[j];
        }
        if (pass == Pass::train) {
            cached_ids = ids;
            has_cache = true;
        }
        return out;
    }

    void backward(const Matrix<T>& dy) {
        if (!has_cache) throw StateError("embedding '" + name + "': backward without cached ids");
        if (dy.rows() != cached_ids.size()) {
            throw ShapeError("embedding '" + name + "': dY rows do not match cached id count");
        }
        for (std::size_t i = 0; i < cached_ids.size(); ++i) {
            T* dst = grad_table.row_ptr(static_cast<std::size_t>(cached_ids[i]));
            const T* src = dy.row_ptr(i);
            for (std::size_t j = 0; j < dy.cols(); ++j) dst[j] += src[j];
        }
    }

    void zero_grads() { grad_table.fill(T(0)); }
};

// Single-head scaled dot-product attention over one [seq x d_head] slice.
template <typename T>
struct ScaledDotAttention {
    Matrix<T> cached_q, cached_k, cached_v;
    Matrix<T> probs;  // seq x seq row-softmax of QK^T/sqrt(d)
    bool has_cache = false;

    Matrix<T> forward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, Pass pass = Pass::infer) {
        if (q.cols() != k.cols() || k.rows() != v.rows()) {
            throw ShapeError("attention: Q " + q.shape_str() + ", K " + k.shape_str() + ", V " +
                             v.shape_str() + " are inconsistent");
        }
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(q.cols()));
        Matrix<T> scores = matmul(q, transpose(k));
        for (auto& s : scores.storage()) s *= inv_sqrt;

        Matrix<T> attn(scores.rows(), scores.cols());
        for (std::size_t i = 0; i < scores.rows(); ++i) {
            const T* srow = scores.row_ptr(i);
            T* arow = attn.row_ptr(i);
            T maxv = srow[0];
            for (std::size_t j = 1; j < scores.cols(); ++j) maxv = std::max(maxv, srow[j]);
            T total = T(0);
            for (std::size_t j = 0; j < scores.cols(); ++j) {
                arow[j] = std::exp(srow[j] - maxv);
                total += arow[j];
            }
            const T inv = T(1) / total;
            for (std::size_t j = 0; j < scores.cols(); ++j) arow[j] *= inv;
        }
        if (pass == Pass::train) {
            cached_q = q;
            cached_k = k;
            cached_v = v;
            probs = attn;
            has_cache = true;
        }
        return matmul(attn, v);
    }

    void backward(const Matrix<T>& dy, Matrix<T>& dq, Matrix<T>& dk, Matrix<T>& dv) const {
        if (!has_cache) throw StateError("attention: backward without cached forward");
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(cached_q.cols()));
        dv = matmul(transpose(probs), dy);
        Matrix<T> dprobs = matmul(dy, transpose(cached_v));
        Matrix<T> dscores(dprobs.rows(), dprobs.cols());
        for (std::size_t i = 0; i < dprobs.rows(); ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j < dprobs.cols(); ++j) dot += dprobs(i, j) * probs(i, j);
            for (std::size_t j = 0; j < dprobs.cols(); ++j) {
                dscores(i, j) = probs(i, j) * (dprobs(i, j) - dot) * inv_sqrt;
            }
        }
        dq = matmul(dscores, cached_k);
        dk = matmul(transpose(dscores), cached_q);
    }
};

// Mean negative log likelihood over rows, with the usual fused softmax gradient.
template <typename T>
struct SoftmaxCrossEntropy {
    Matrix<T> cached_probs;
    std::vector<std::int32_t> cached_labels;
    bool has_cache = false;

    double forward(const Matrix<T>& logits, const std::vector<std::int32_t>& labels, Pass pass = Pass::train) {
        if (logits.rows() != labels.size()) {
            throw ShapeError("cross_entropy: logits rows " + std::to_string(logits.rows()) +
                             " vs labels " + std::to_string(labels.size()));
        }
        Matrix<T> probs(logits.rows(), logits.cols());
        double loss = 0.0;
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            const T* row = logits.row_ptr(i);
            T maxv = row[0];
            for (std::size_t j = 1; j < logits.cols(); ++j) maxv = std::max(maxv, row[j]);
            double total = 0.0;
            for (std::size_t j = 0; j < logits.cols(); ++j) {
                total += std::exp(static_cast<double>(row[j] - maxv));
            }
            const double log_total = std::log(total);
            const std::int32_t label = labels[i];
            if (label < 0 || static_cast<std::size_t>(label) >= logits.cols()) {
                throw ConfigError("cross_entropy: label " + std::to_string(label) + " outside class count " +
                                  std::to_string(logits.cols()));
            }
            loss -= static_cast<double>(row[label] - maxv) - log_total;
            for (std::size_t j = 0; j < logits.cols(); ++j) {
                probs(i, j) = static_cast<T>(std::exp(static_cast<double>(row[j] - maxv)) / total);
            }
        }
        loss /= static_cast<double>(logits.rows());
        if (pass == Pass::train) {
            cached_probs = probs;
            cached_labels = labels;
            has_cache = true;
        }
        return loss;
    }

    Matrix<T> backward() const {
        if (!has_cache) throw StateError("cross_entropy: backward without cached forward");
        Matrix<T> dlogits = cached_probs;
        const T inv_n = T(1) / static_cast<T>(cached_probs.rows());
        for (std::size_t i = 0; i < dlogits.rows(); ++i) {
            dlogits(i, cached_labels[i]) -= T(1);
            T* row = dlogits.row_ptr(i);
            for (std::size_t j = 0; j < dlogits.cols(); ++j) row[j] *= inv_n;
        }
        return dlogits;
    }
};

}  // namespace migu
