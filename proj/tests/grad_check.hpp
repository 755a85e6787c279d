#pragma once

// Central finite-difference checking shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dis/ops.hpp"
#include "dis/rng.hpp"

namespace dis::testing {

using Tensor64 = Tensor<double>;

/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
/// components that are zero up to truncation error from dominating.
inline double relative_error(double analytic, double numeric, double floor = 1e-3)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline Tensor64 random_leaf(Shape shape, Rng& rng, double scale = 1.0)
{
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) {
        x = scale * rng.normal();
    }
    return Tensor64::parameter(std::move(shape), std::move(v));
}

/// Maximum relative error between backward() and central differences over
/// every element of every input. `f` maps the inputs to a scalar loss.
inline double max_grad_error(const std::function<Tensor64(const std::vector<Tensor64>&)>& f,
                             const std::vector<Tensor64>& inputs, double step = 1e-4)
{
    for (const auto& input : inputs) {
        input.node()->grad.clear();
    }
    backward(f(inputs));
    double worst = 0.0;
    for (std::size_t which = 0; which < inputs.size(); ++which) {
        const Tensor64 analytic = inputs[which].grad();
        for (Index i = 0; i < inputs[which].numel(); ++i) {
            auto probe = [&](double offset) {
                NoGradGuard no_grad;
                std::vector<Tensor64> shifted = inputs;
                std::vector<double> v(inputs[which].values().begin(), inputs[which].values().end());
                v[static_cast<std::size_t>(i)] += offset;
                shifted[which] = Tensor64(inputs[which].shape(), std::move(v));
                return f(shifted).item();
            };
            const double numeric = (probe(step) - probe(-step)) / (2 * step);
            worst = std::max(worst, relative_error(analytic.values()[static_cast<std::size_t>(i)], numeric));
        }
    }
    return worst;
}

/// Weighted sum so that every output element contributes with its own weight.
inline Tensor64 weighted_sum(const Tensor64& y, std::uint64_t seed = 99)
{
    Rng rng(seed, 7);
    std::vector<double> w(static_cast<std::size_t>(y.numel()));
    for (auto& x : w) {
        x = rng.normal();
    }
    return sum(y * Tensor64(y.shape(), std::move(w)));
}

} // namespace dis::testing
