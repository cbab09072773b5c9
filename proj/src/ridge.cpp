#include "ulab/ridge.hpp"

#include <cmath>

#include "ulab/errors.hpp"

namespace ulab {

bool cholesky_factor(Matrix& a) {
    const int n = a.rows;
    for (int j = 0; j < n; ++j) {
        double d = a(j, j);
        for (int k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
        if (!(d > 0.0) || !std::isfinite(d)) return false;
        const double ljj = std::sqrt(d);
        a(j, j) = ljj;
        for (int i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (int k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
            a(i, j) = s / ljj;
        }
        for (int k = j + 1; k < n; ++k) a(j, k) = 0.0;
    }
    return true;
}

Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
    const int n = l.rows;
    if (b.rows != n) throw DimError("cholesky_solve: rhs row count mismatch");
    Matrix x = b;
    // forward: L y = b
    for (int c = 0; c < b.cols; ++c) {
        for (int i = 0; i < n; ++i) {
            double s = x(i, c);
            for (int k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
            x(i, c) = s / l(i, i);
        }
        // back: L^T x = y
        for (int i = n - 1; i >= 0; --i) {
            double s = x(i, c);
            for (int k = i + 1; k < n; ++k) s -= l(k, i) * x(k, c);
            x(i, c) = s / l(i, i);
        }
    }
    return x;
}

int estimate_rank(Matrix a, double rel_tol) {
    const int n = a.rows, m = a.cols;
    const double tol = rel_tol * std::max(n, m) * std::max(max_abs(a), 1e-300);
    int rank = 0;
    int row = 0;
    for (int col = 0; col < m && row < n; ++col) {
        int piv = row;
        for (int i = row + 1; i < n; ++i) {
            if (std::fabs(a(i, col)) > std::fabs(a(piv, col))) piv = i;
        }
        if (std::fabs(a(piv, col)) <= tol) continue;
        if (piv != row) {
            for (int j = 0; j < m; ++j) std::swap(a(piv, j), a(row, j));
        }
        for (int i = row + 1; i < n; ++i) {
            const double f = a(i, col) / a(row, col);
            for (int j = col; j < m; ++j) a(i, j) -= f * a(row, j);
        }
        ++row;
        ++rank;
    }
    return rank;
}

Matrix ridge_solve(const Matrix& h, const Matrix& t, double gamma, RidgeInfo* info) {
    if (h.rows != t.rows) {
        throw DimError("ridge_solve: H and T row counts differ (" + std::to_string(h.rows) + " vs " +
                       std::to_string(t.rows) + ")");
    }
    if (gamma < 0.0) throw ConfigError("ridge_solve: gamma must be non-negative");
    const int n = h.cols;
    Matrix gram = matmul_tn(h, h);
    const double gram_trace = trace(gram);
    Matrix a = gram;
    for (int i = 0; i < n; ++i) a(i, i) += gamma;

    Matrix l = a;
    if (!cholesky_factor(l)) {
        if (gamma == 0.0) {
            const int rank = estimate_rank(gram);
            throw SingularError("ridge_solve: H^T H is singular with gamma = 0 (rank " + std::to_string(rank) +
                                " of " + std::to_string(n) + ")");
        }
        const double jitter = 1e-10 * gram_trace / n;
        l = a;
        for (int i = 0; i < n; ++i) l(i, i) += jitter;
        if (!cholesky_factor(l)) {
            throw SingularError("ridge_solve: decomposition failed even with diagonal jitter");
        }
        if (info) {
            info->jitter_applied = true;
            info->jitter = jitter;
        }
    }
    Matrix rhs = matmul_tn(h, t);
    Matrix w = cholesky_solve(l, rhs);
    check_finite(w, "ridge_solve");
    return w;
}

}  // namespace ulab
