#pragma once

#include "ulab/matrix.hpp"

namespace ulab {

struct RidgeInfo {
    bool jitter_applied = false;
    double jitter = 0.0;
};

// Solves (H^T H + gamma I) W = H^T T for W via Cholesky; minimizes
// ||H W - T||_F^2 + gamma ||W||_F^2.
//
// gamma == 0 with rank-deficient H^T H raises SingularError naming the
// estimated rank. gamma > 0 decompositions that still fail numerically are
// retried once with jitter 1e-10 * trace(H^T H)/n added to the diagonal;
// the retry is reported through `info` when provided.
Matrix ridge_solve(const Matrix& h, const Matrix& t, double gamma, RidgeInfo* info = nullptr);

// In-place lower Cholesky of SPD `a`; returns false when a non-positive pivot
// is hit.
bool cholesky_factor(Matrix& a);

// Solves L L^T x = b for each column of b given the factor from cholesky_factor.
Matrix cholesky_solve(const Matrix& l, const Matrix& b);

// Rank via Gaussian elimination with partial pivoting; used for the gamma == 0
// diagnostic only.
int estimate_rank(Matrix a, double rel_tol = 1e-12);

}  // namespace ulab
