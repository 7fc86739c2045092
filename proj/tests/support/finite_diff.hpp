#pragma once

// Test-side central finite-difference oracle. Kept independent of the tape's
// backward pass: it only re-runs a caller-supplied forward closure.

#include <cmath>
#include <functional>

#include "recosa/tensor.hpp"

namespace testsupport {

// eval() must recompute the scalar loss from the current contents of x.
inline recosa::Array fd_gradient(const std::function<double()>& eval, recosa::Array& x,
                                 double h = 1e-5) {
    recosa::Array g(x.shape, 0.0);
    for (long i = 0; i < x.numel(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = eval();
        x[i] = orig - h;
        const double fm = eval();
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

struct GradCompare {
    double max_abs_diff = 0.0;
    double worst_rel = 0.0;
    bool ok = true;
};

// Elementwise: pass when |a-b| <= abs_floor (finite-difference noise floor)
// or |a-b| <= rel_tol * max(|a|,|b|).
inline GradCompare compare_grads(const recosa::Array& analytic, const recosa::Array& fd,
                                 double rel_tol = 1e-4, double abs_floor = 1e-8) {
    GradCompare r;
    for (long i = 0; i < analytic.numel(); ++i) {
        const double a = analytic[i];
        const double b = fd[i];
        const double diff = std::fabs(a - b);
        const double mag = std::max(std::fabs(a), std::fabs(b));
        r.max_abs_diff = std::max(r.max_abs_diff, diff);
        if (diff > abs_floor) {
            const double rel = diff / mag;
            r.worst_rel = std::max(r.worst_rel, rel);
            if (rel > rel_tol) r.ok = false;
        }
    }
    return r;
}

}  // namespace testsupport
