#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "migu/error.hpp"
#include "migu/rng.hpp"

namespace migu {

// Dense row-major matrix. The single value carrier for weights, activations,
// gradients and masks; float for training paths, double for oracle paths.
// Row-major layout keeps per-column access (masking, Adam moment columns) a
// simple strided walk.
template <typename T>
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::initializer_list<std::initializer_list<T>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_) throw ShapeError("matrix initializer rows have unequal lengths");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, T(0)); }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n, T(0));
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }

    static Matrix randn(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
        Matrix m(rows, cols);
        for (auto& v : m.data_) v = static_cast<T>(rng.normal(0.0, stddev));
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
    const T* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }

    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool all_finite() const {
        for (const T& v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    bool operator==(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
    }

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.storage()[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

namespace detail {
inline void check_same_shape(std::size_t ar, std::size_t ac, std::size_t br, std::size_t bc,
                             const char* op) {
    if (ar != br || ac != bc) {
        throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(ar) + "x" +
                         std::to_string(ac) + " vs " + std::to_string(br) + "x" + std::to_string(bc));
    }
}
}  // namespace detail

// C = A * B. Plain ikj loop; single-threaded and deterministic.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree, " + a.shape_str() + " * " + b.shape_str());
    }
    Matrix<T> c(a.rows(), b.cols(), T(0));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a.row_ptr(i);
        T* crow = c.row_ptr(i);
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b.row_ptr(p);
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
    detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "add");
    Matrix<T> c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c.storage()[i] = a.storage()[i] + b.storage()[i];
    return c;
}

template <typename T>
Matrix<T> sub(const Matrix<T>& a, const Matrix<T>& b) {
    detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "sub");
    Matrix<T> c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c.storage()[i] = a.storage()[i] - b.storage()[i];
    return c;
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
    detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "hadamard");
    Matrix<T> c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c.storage()[i] = a.storage()[i] * b.storage()[i];
    return c;
}

template <typename T>
Matrix<T> scale(const Matrix<T>& a, T factor) {
    Matrix<T> c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c.storage()[i] = a.storage()[i] * factor;
    return c;
}

template <typename T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
    detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "add_inplace");
    for (std::size_t i = 0; i < a.size(); ++i) a.storage()[i] += b.storage()[i];
}

// Adds a 1xN row vector to every row of A.
template <typename T>
void add_row_broadcast(Matrix<T>& a, const Matrix<T>& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError("add_row_broadcast: want 1x" + std::to_string(a.cols()) + ", got " + row.shape_str());
    }
    for (std::size_t i = 0; i < a.rows(); ++i) {
        T* arow = a.row_ptr(i);
        for (std::size_t j = 0; j < a.cols(); ++j) arow[j] += row(0, j);
    }
}

// 1xN matrix whose entries are the column sums of A.
template <typename T>
Matrix<T> col_sums(const Matrix<T>& a) {
    Matrix<T> s(1, a.cols(), T(0));
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const T* arow = a.row_ptr(i);
        for (std::size_t j = 0; j < a.cols(); ++j) s(0, j) += arow[j];
    }
    return s;
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
    detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "max_abs_diff");
    T worst = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a.storage()[i] - b.storage()[i]));
    }
    return worst;
}

}  // namespace migu
