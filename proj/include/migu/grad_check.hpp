#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>

#include "migu/error.hpp"
#include "migu/matrix.hpp"

namespace migu {

// Result of comparing an analytic gradient against the central-difference oracle.
struct GradOracleReport {
    double max_rel_error = 0.0;
    double eps = 0.0;
    bool pass = false;
    std::size_t worst_row = 0;
    std::size_t worst_col = 0;
};

// Central differences (f(p+eps*e) - f(p-eps*e)) / (2 eps) per entry, all in
// 64-bit. The independent oracle every analytic backward is checked against.
inline Matrix<double> finite_diff_grad(const std::function<double(const Matrix<double>&)>& loss_fn,
                                       const Matrix<double>& param, double eps) {
    Matrix<double> grad(param.rows(), param.cols());
    Matrix<double> probe = param;
    for (std::size_t i = 0; i < param.rows(); ++i) {
        for (std::size_t j = 0; j < param.cols(); ++j) {
            const double saved = probe(i, j);
            probe(i, j) = saved + eps;
            const double plus = loss_fn(probe);
            probe(i, j) = saved - eps;
            const double minus = loss_fn(probe);
            probe(i, j) = saved;
            if (!std::isfinite(plus) || !std::isfinite(minus)) {
                throw NumericError("finite_diff_grad: non-finite loss perturbing entry (" +
                                   std::to_string(i) + "," + std::to_string(j) + ")");
            }
            grad(i, j) = (plus - minus) / (2.0 * eps);
        }
    }
    return grad;
}

// Relative error with a small absolute floor so near-zero entries compare on
// an absolute scale.
inline double grad_rel_error(double analytic, double numeric) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    return std::abs(analytic - numeric) / scale;
}

inline GradOracleReport compare_gradients(const Matrix<double>& analytic, const Matrix<double>& numeric,
                                          double tolerance, double eps_used) {
    if (!analytic.same_shape(numeric)) {
        throw ShapeError("compare_gradients: " + analytic.shape_str() + " vs " + numeric.shape_str());
    }
    GradOracleReport report;
    report.eps = eps_used;
    for (std::size_t i = 0; i < analytic.rows(); ++i) {
        for (std::size_t j = 0; j < analytic.cols(); ++j) {
            const double err = grad_rel_error(analytic(i, j), numeric(i, j));
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_row = i;
                report.worst_col = j;
            }
        }
    }
    report.pass = report.max_rel_error < tolerance;
    return report;
}

}  // namespace migu
