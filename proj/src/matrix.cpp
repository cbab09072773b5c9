#include "ulab/matrix.hpp"

#include <cmath>
#include <cstring>

#include "ulab/errors.hpp"

namespace ulab {

Matrix::Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {
    if (r < 0 || c < 0) throw DimError("Matrix: negative shape");
}

Matrix::Matrix(int r, int c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != static_cast<size_t>(r) * c) throw DimError("Matrix: data length does not match shape");
}

void Matrix::fill(double v) {
    for (double& x : data) x = v;
}

bool Matrix::all_finite() const {
    for (double x : data) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

Matrix Matrix::zeros(int r, int c) { return Matrix(r, c); }

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::gaussian(int r, int c, Rng& rng, double mean, double stddev) {
    Matrix m(r, c);
    for (double& x : m.data) x = rng.gaussian(mean, stddev);
    return m;
}

void check_same_shape(const Matrix& a, const Matrix& b, const std::string& where) {
    if (!a.same_shape(b)) {
        throw DimError(where + ": shape mismatch (" + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                       " vs " + std::to_string(b.rows) + "x" + std::to_string(b.cols) + ")");
    }
}

void check_finite(const Matrix& m, const std::string& where) {
    if (!m.all_finite()) throw NumericError(where + ": non-finite entries");
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw DimError("matmul: inner dimensions differ (" + std::to_string(a.cols) + " vs " +
                       std::to_string(b.rows) + ")");
    }
    Matrix c(a.rows, b.cols);
    const int n = a.rows, k = a.cols, m = b.cols;
    for (int i = 0; i < n; ++i) {
        const double* arow = a.data.data() + static_cast<size_t>(i) * k;
        double* crow = c.data.data() + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b.data.data() + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) {
        throw DimError("matmul_nt: inner dimensions differ (" + std::to_string(a.cols) + " vs " +
                       std::to_string(b.cols) + ")");
    }
    Matrix c(a.rows, b.rows);
    const int k = a.cols;
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + static_cast<size_t>(i) * k;
        double* crow = c.data.data() + static_cast<size_t>(i) * b.rows;
        for (int j = 0; j < b.rows; ++j) {
            const double* brow = b.data.data() + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] = s;
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) {
        throw DimError("matmul_tn: inner dimensions differ (" + std::to_string(a.rows) + " vs " +
                       std::to_string(b.rows) + ")");
    }
    Matrix c(a.cols, b.cols);
    for (int p = 0; p < a.rows; ++p) {
        const double* arow = a.data.data() + static_cast<size_t>(p) * a.cols;
        const double* brow = b.data.data() + static_cast<size_t>(p) * b.cols;
        for (int i = 0; i < a.cols; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c.data.data() + static_cast<size_t>(i) * b.cols;
            for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    }
    return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "add");
    Matrix c(a.rows, a.cols);
    for (size_t i = 0; i < a.size(); ++i) c.data[i] = a.data[i] + b.data[i];
    return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "sub");
    Matrix c(a.rows, a.cols);
    for (size_t i = 0; i < a.size(); ++i) c.data[i] = a.data[i] - b.data[i];
    return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "hadamard");
    Matrix c(a.rows, a.cols);
    for (size_t i = 0; i < a.size(); ++i) c.data[i] = a.data[i] * b.data[i];
    return c;
}

Matrix scale(const Matrix& a, double c) {
    Matrix r(a.rows, a.cols);
    for (size_t i = 0; i < a.size(); ++i) r.data[i] = a.data[i] * c;
    return r;
}

void add_in_place(Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "add_in_place");
    for (size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

void axpy_in_place(Matrix& a, double c, const Matrix& b) {
    check_same_shape(a, b, "axpy_in_place");
    for (size_t i = 0; i < a.size(); ++i) a.data[i] += c * b.data[i];
}

double dot_all(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "dot_all");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

double frobenius_norm(const Matrix& a) { return std::sqrt(dot_all(a, a)); }

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double x : a.data) m = std::max(m, std::fabs(x));
    return m;
}

double trace(const Matrix& a) {
    const int n = std::min(a.rows, a.cols);
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a(i, i);
    return s;
}

}  // namespace ulab
