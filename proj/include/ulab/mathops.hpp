#pragma once

#include "ulab/matrix.hpp"

namespace ulab {

double gelu_scalar(double x);
double gelu_grad_scalar(double x);
double softplus_scalar(double x);
double sigmoid_scalar(double x);

Matrix gelu(const Matrix& x);
Matrix softplus(const Matrix& x);

// y[r] = x[r] * gain / sqrt(mean(x[r]^2) + eps); gain is 1 x cols.
// If inv_rms_out is non-null it receives a rows x 1 matrix of 1/sqrt(mean+eps).
Matrix rms_norm(const Matrix& x, const Matrix& gain, double eps, Matrix* inv_rms_out = nullptr);

Matrix softmax_rows(const Matrix& x);
Matrix log_softmax_rows(const Matrix& x);

}  // namespace ulab
