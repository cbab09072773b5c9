#include "ulab/mathops.hpp"

#include <cmath>

#include "ulab/errors.hpp"

namespace ulab {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad_scalar(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Matrix gelu(const Matrix& x) {
    Matrix y(x.rows, x.cols);
    for (size_t i = 0; i < x.size(); ++i) y.data[i] = gelu_scalar(x.data[i]);
    return y;
}

Matrix softplus(const Matrix& x) {
    Matrix y(x.rows, x.cols);
    for (size_t i = 0; i < x.size(); ++i) y.data[i] = softplus_scalar(x.data[i]);
    return y;
}

Matrix rms_norm(const Matrix& x, const Matrix& gain, double eps, Matrix* inv_rms_out) {
    if (gain.rows != 1 || gain.cols != x.cols) throw DimError("rms_norm: gain must be 1 x cols");
    Matrix y(x.rows, x.cols);
    if (inv_rms_out) *inv_rms_out = Matrix(x.rows, 1);
    for (int r = 0; r < x.rows; ++r) {
        double ss = 0.0;
        for (int c = 0; c < x.cols; ++c) ss += x(r, c) * x(r, c);
        const double s = 1.0 / std::sqrt(ss / x.cols + eps);
        if (inv_rms_out) (*inv_rms_out)(r, 0) = s;
        for (int c = 0; c < x.cols; ++c) y(r, c) = x(r, c) * gain(0, c) * s;
    }
    return y;
}

Matrix softmax_rows(const Matrix& x) {
    Matrix p(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r) {
        double m = x(r, 0);
        for (int c = 1; c < x.cols; ++c) m = std::max(m, x(r, c));
        double z = 0.0;
        for (int c = 0; c < x.cols; ++c) {
            const double e = std::exp(x(r, c) - m);
            p(r, c) = e;
            z += e;
        }
        const double inv = 1.0 / z;
        for (int c = 0; c < x.cols; ++c) p(r, c) *= inv;
    }
    return p;
}

Matrix log_softmax_rows(const Matrix& x) {
    Matrix lp(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r) {
        double m = x(r, 0);
        for (int c = 1; c < x.cols; ++c) m = std::max(m, x(r, c));
        double z = 0.0;
        for (int c = 0; c < x.cols; ++c) z += std::exp(x(r, c) - m);
        const double logz = m + std::log(z);
        for (int c = 0; c < x.cols; ++c) lp(r, c) = x(r, c) - logz;
    }
    return lp;
}

}  // namespace ulab
