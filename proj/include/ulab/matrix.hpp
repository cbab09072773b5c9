#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ulab/rng.hpp"

namespace ulab {

// Dense row-major float64 matrix. Shape is fixed at construction.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c);
    Matrix(int r, int c, std::vector<double> values);

    double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    void fill(double v);
    bool all_finite() const;

    static Matrix zeros(int r, int c);
    static Matrix identity(int n);
    static Matrix gaussian(int r, int c, Rng& rng, double mean = 0.0, double stddev = 1.0);
};

// Throws DimError naming `where` when shapes are incompatible.
void check_same_shape(const Matrix& a, const Matrix& b, const std::string& where);
void check_finite(const Matrix& m, const std::string& where);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T * b
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double c);

void add_in_place(Matrix& a, const Matrix& b);
void axpy_in_place(Matrix& a, double c, const Matrix& b);  // a += c * b

double dot_all(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
double trace(const Matrix& a);

}  // namespace ulab
