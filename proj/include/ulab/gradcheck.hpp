#pragma once

#include <functional>

#include "ulab/matrix.hpp"
#include "ulab/rng.hpp"

namespace ulab {

// Max relative error between `analytic` and central finite differences of
// `f` over every entry of `param`; relative error uses
// |a - b| / max(|a|, |b|, 1e-8). `f` is re-evaluated with perturbed copies,
// `param` is left unchanged.
double finite_diff_check(const std::function<double(const Matrix&)>& f, const Matrix& param,
                         const Matrix& analytic, double h = 1e-5);

// Same check restricted to n_probe randomly chosen entries; keeps whole-model
// gradient audits affordable.
double finite_diff_spot_check(const std::function<double(const Matrix&)>& f, const Matrix& param,
                              const Matrix& analytic, int n_probe, Rng& rng, double h = 1e-5);

double rel_err(double a, double b);

}  // namespace ulab
