#pragma once

// End-to-end gradient check of the whole network in double precision.

#include <cstdint>
#include <string>
#include <vector>

#include "dis/model.hpp"
#include "grad_check.hpp"

namespace dis::testing {

inline ModelConfig tiny_model_config()
{
    ModelConfig c;
    c.L = 3;
    c.D = 8;
    c.N = 4;
    c.p = 2;
    c.H = 4;
    c.W = 4;
    c.C = 1;
    c.num_classes = 2;
    c.freq_dim = 16;
    return c;
}

/// Worst relative error over `probes` randomly chosen scalar parameters.
/// Parameters are jittered away from their structured init first so that
/// zero-initialized paths carry gradient too.
inline double model_grad_error(const ModelConfig& config, std::uint64_t seed, int probes = 10, double step = 1e-4)
{
    Rng rng(seed, 3);
    DisModel<double> model(config, rng);
    for (auto& [name, tensor] : model.params()) {
        for (auto& v : tensor.mutable_values()) {
            v += 0.1 * rng.normal();
        }
    }
    const Index batch = 2;
    const Tensor64 x({batch, config.H, config.W, config.C},
                     rng.normal_vector<double>(static_cast<std::size_t>(batch * config.H * config.W * config.C)));
    const std::vector<int> timesteps = {3, 517};
    const std::vector<int> classes = config.num_classes > 0 ? std::vector<int>{1, config.null_class()} : std::vector<int>{};
    const auto loss = [&] {
        const auto out = model.forward(x, timesteps, classes);
        return config.learn_sigma ? weighted_sum(out.eps, 5) + weighted_sum(out.v, 6) : weighted_sum(out.eps, 5);
    };

    const auto grads = backward(loss(), model.params());
    std::vector<std::string> names;
    for (const auto& [name, tensor] : model.params()) {
        names.push_back(name);
    }
    double worst = 0.0;
    for (int probe = 0; probe < probes; ++probe) {
        const std::string& name = names[static_cast<std::size_t>(rng.uniform_int(0, int(names.size()) - 1))];
        auto& tensor = model.params().get(name);
        const auto i = static_cast<std::size_t>(rng.uniform_int(0, int(tensor.numel()) - 1));
        auto values = tensor.mutable_values();
        const double saved = values[i];
        NoGradGuard no_grad;
        values[i] = saved + step;
        const double up = loss().item();
        values[i] = saved - step;
        const double down = loss().item();
        values[i] = saved;
        worst = std::max(worst, relative_error(grads.at(name).values()[i], (up - down) / (2 * step)));
    }
    return worst;
}

} // namespace dis::testing
