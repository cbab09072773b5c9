#include "ulab/gradcheck.hpp"

#include <cmath>

#include "ulab/errors.hpp"

namespace ulab {

double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8});
}

namespace {

double probe(const std::function<double(const Matrix&)>& f, const Matrix& param, size_t idx, double h,
             double analytic) {
    Matrix p = param;
    p.data[idx] = param.data[idx] + h;
    const double fp = f(p);
    p.data[idx] = param.data[idx] - h;
    const double fm = f(p);
    const double numeric = (fp - fm) / (2.0 * h);
    return rel_err(analytic, numeric);
}

}  // namespace

double finite_diff_check(const std::function<double(const Matrix&)>& f, const Matrix& param,
                         const Matrix& analytic, double h) {
    check_same_shape(param, analytic, "finite_diff_check");
    double worst = 0.0;
    for (size_t i = 0; i < param.size(); ++i) {
        worst = std::max(worst, probe(f, param, i, h, analytic.data[i]));
    }
    return worst;
}

double finite_diff_spot_check(const std::function<double(const Matrix&)>& f, const Matrix& param,
                              const Matrix& analytic, int n_probe, Rng& rng, double h) {
    check_same_shape(param, analytic, "finite_diff_spot_check");
    double worst = 0.0;
    const size_t n = param.size();
    for (int k = 0; k < n_probe; ++k) {
        const size_t idx = static_cast<size_t>(rng.uniform_int(n));
        worst = std::max(worst, probe(f, param, idx, h, analytic.data[idx]));
    }
    return worst;
}

}  // namespace ulab
