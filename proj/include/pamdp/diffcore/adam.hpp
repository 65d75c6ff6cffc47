#pragma once

#include "pamdp/diffcore/tensor.hpp"

#include <cmath>
#include <string>

namespace pamdp {

struct AdamState {
    Vector m;
    Vector v;
    std::size_t step = 0;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update, in place. Descends along `grad`.
inline void adam_step(Vector& params, const Vector& grad, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
    if (grad.size() != params.size()) {
        throw ShapeError("adam_step: gradient length " + std::to_string(grad.size()) +
                         " != parameter length " + std::to_string(params.size()));
    }
    if (state.m.size() == 0) {
        state.m = Vector::Zero(params.size());
        state.v = Vector::Zero(params.size());
    } else if (state.m.size() != params.size()) {
        throw ShapeError("adam_step: optimizer state does not match parameter length");
    }
    ++state.step;
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    params.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.eps);
}

}  // namespace pamdp
