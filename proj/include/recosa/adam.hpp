#pragma once

// Adam with bias correction over plain f64 arrays, plus global-norm clipping.

#include <cmath>
#include <string>
#include <vector>

#include "recosa/tensor.hpp"

namespace recosa {

struct AdamHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Array m;  // first moment, zero-initialized, same shape as the parameter
    Array v;  // second moment, elementwise >= 0 always
    long t = 0;

    explicit AdamState(const Shape& shape) : m(shape, 0.0), v(shape, 0.0) {}
    AdamState() = default;
};

inline void check_grad_finite(const Array& grad, const std::string& name) {
    for (double g : grad.data) {
        if (!std::isfinite(g)) fail_runtime("adam_step: non-finite gradient for " + name);
    }
}

// One Adam update. The gradient is validated before any state mutation.
inline void adam_step(Array& param, const Array& grad, AdamState& state, const AdamHyper& hp,
                      const std::string& name = "param") {
    if (!same_shape(param.shape, grad.shape) || !same_shape(param.shape, state.m.shape)) {
        fail_runtime("adam_step: shape mismatch for " + name + ": param " + shape_str(param.shape) +
                     ", grad " + shape_str(grad.shape));
    }
    check_grad_finite(grad, name);
    state.t += 1;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
    for (long i = 0; i < param.numel(); ++i) {
        const double g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        param[i] -= hp.lr * m_hat / (std::sqrt(v_hat) + hp.eps);
    }
}

// Scales the whole gradient set so its global L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_global_norm(std::vector<Array>& grads, double max_norm) {
    double sq = 0.0;
    for (const Array& g : grads)
        for (double v : g.data) sq += v * v;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (Array& g : grads)
            for (double& v : g.data) v *= s;
    }
    return norm;
}

}  // namespace recosa
