#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "dis/tensor.hpp"

namespace dis {

/// base * (1 + cos(pi * step / total)) / 2, no warmup.
inline double cosine_lr(long step, long total, double base = 1e-4)
{
    if (total < 1 || step < 0 || step > total) {
        throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
    }
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total)));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    bool operator==(const AdamWConfig&) const = default;
};

/// Decoupled-weight-decay Adam with bias correction. Moments are keyed by
/// parameter name and shaped like the parameters.
template <typename Scalar>
class AdamW {
public:
    AdamW(const ParameterSet<Scalar>& params, AdamWConfig config) : config_(config)
    {
        for (const auto& [name, tensor] : params) {
            m_.emplace(name, std::vector<Scalar>(static_cast<std::size_t>(tensor.numel()), Scalar(0)));
            v_.emplace(name, std::vector<Scalar>(static_cast<std::size_t>(tensor.numel()), Scalar(0)));
        }
    }

    /// Rejects the whole step when any gradient is non-finite.
    void step(ParameterSet<Scalar>& params, const std::map<std::string, Tensor<Scalar>>& grads, double lr)
    {
        for (const auto& [name, grad] : grads) {
            for (Scalar g : grad.values()) {
                if (!std::isfinite(double(g))) {
                    throw NumericError("non-finite gradient for parameter '" + name + "'");
                }
            }
        }
        ++steps_;
        const double c1 = 1.0 - std::pow(config_.beta1, double(steps_));
        const double c2 = 1.0 - std::pow(config_.beta2, double(steps_));
        for (auto& [name, tensor] : params) {
            auto it = grads.find(name);
            if (it == grads.end()) {
                throw ContractError("missing gradient for parameter '" + name + "'");
            }
            const auto g = it->second.values();
            auto& m = m_.at(name);
            auto& v = v_.at(name);
            auto w = tensor.mutable_values();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g[i];
                const double mi = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
                const double vi = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
                m[i] = static_cast<Scalar>(mi);
                v[i] = static_cast<Scalar>(vi);
                double wi = w[i];
                wi -= lr * config_.weight_decay * wi;
                wi -= lr * (double(m[i]) / c1) / (std::sqrt(double(v[i]) / c2) + config_.eps);
                w[i] = static_cast<Scalar>(wi);
            }
        }
    }

    long steps() const { return steps_; }
    void set_steps(long steps) { steps_ = steps; }
    const AdamWConfig& config() const { return config_; }
    std::map<std::string, std::vector<Scalar>>& first_moments() { return m_; }
    std::map<std::string, std::vector<Scalar>>& second_moments() { return v_; }
    const std::map<std::string, std::vector<Scalar>>& first_moments() const { return m_; }
    const std::map<std::string, std::vector<Scalar>>& second_moments() const { return v_; }

private:
    AdamWConfig config_;
    long steps_ = 0;
    std::map<std::string, std::vector<Scalar>> m_;
    std::map<std::string, std::vector<Scalar>> v_;
};

/// shadow <- decay * shadow + (1 - decay) * params
template <typename Scalar>
void ema_update(std::vector<Scalar>& shadow, std::span<const Scalar> params, double decay)
{
    if (shadow.size() != params.size()) {
        throw ShapeError("ema_update: shadow has " + std::to_string(shadow.size()) + " values, params " +
                         std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < shadow.size(); ++i) {
        shadow[i] = static_cast<Scalar>(decay * double(shadow[i]) + (1.0 - decay) * double(params[i]));
    }
}

/// Shadow copy of every parameter, started at the current values.
template <typename Scalar>
class Ema {
public:
    Ema(const ParameterSet<Scalar>& params, double decay) : decay_(decay)
    {
        for (const auto& [name, tensor] : params) {
            shadow_.emplace(name, std::vector<Scalar>(tensor.values().begin(), tensor.values().end()));
        }
    }

    void update(const ParameterSet<Scalar>& params)
    {
        for (const auto& [name, tensor] : params) {
            ema_update(shadow_.at(name), tensor.values(), decay_);
        }
    }

    /// Overwrites `params` with the shadow values.
    void copy_to(ParameterSet<Scalar>& params) const
    {
        for (auto& [name, tensor] : params) {
            const auto& s = shadow_.at(name);
            std::copy(s.begin(), s.end(), tensor.mutable_values().begin());
        }
    }

    double decay() const { return decay_; }
    std::map<std::string, std::vector<Scalar>>& shadow() { return shadow_; }
    const std::map<std::string, std::vector<Scalar>>& shadow() const { return shadow_; }

private:
    double decay_;
    std::map<std::string, std::vector<Scalar>> shadow_;
};

} // namespace dis
