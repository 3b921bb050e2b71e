#pragma once

// Test-only oracles: central finite differences and related helpers. These
// stay independent of the analytic backward paths they are used to check.

#include <cmath>
#include <functional>

#include "d3/nn.hpp"
#include "d3/tensor.hpp"

namespace d3::testing {

inline double relative_error(double a, double b, double floor = 1e-10) {
    double denom = std::max(std::max(std::abs(a), std::abs(b)), floor);
    return std::abs(a - b) / denom;
}

/// Central finite difference of a scalar function with respect to one entry
/// of a tensor.
inline double central_diff(Tensor& t, std::size_t index,
                           const std::function<double()>& eval, double h = 1e-6) {
    double saved = t[index];
    t.set(index, saved + h);
    double plus = eval();
    t.set(index, saved - h);
    double minus = eval();
    t.set(index, saved);
    return (plus - minus) / (2.0 * h);
}

/// Max relative error between an analytic parameter gradient and the central
/// finite difference of the loss through a fresh forward pass each probe.
inline double max_param_grad_error(Model& model, const Tensor& batch,
                                   const std::vector<int>& labels, double h = 1e-6) {
    auto loss_fn = [&]() {
        auto logits = forward_logits(model, batch);
        return softmax_cross_entropy(logits, labels).loss;
    };

    auto [logits, cache] = forward(model, batch);
    auto ce = softmax_cross_entropy(logits, labels);
    ParamSet grads = backward(model, cache, ce.grad_logits);

    double worst = 0.0;
    for (auto& [name, p] : model.params()) {
        const Tensor& g = grads.at(name);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            double fd = central_diff(p, i, loss_fn, h);
            worst = std::max(worst, relative_error(g[i], fd, 1e-6));
        }
    }
    // The probes mutated entries in place; restore the version counter state
    // by reloading the (unchanged) values.
    model.bump_params_version();
    return worst;
}

} // namespace d3::testing
