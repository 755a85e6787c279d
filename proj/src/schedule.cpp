#include <cmath>
#include <numeric>

#include "dis/diffusion.hpp"

namespace dis {

NoiseSchedule schedule_from_betas(std::vector<double> betas, std::vector<int> timestep_map)
{
    const int steps = static_cast<int>(betas.size());
    if (steps < 1) {
        throw ContractError("schedule needs at least one step");
    }
    for (double b : betas) {
        if (!(b > 0.0 && b < 1.0)) {
            throw ContractError("beta " + std::to_string(b) + " outside (0, 1)");
        }
    }
    if (timestep_map.empty()) {
        timestep_map.resize(betas.size());
        std::iota(timestep_map.begin(), timestep_map.end(), 0);
    }
    NoiseSchedule s;
    s.T = steps;
    s.betas = std::move(betas);
    s.timestep_map = std::move(timestep_map);
    double running = 1.0;
    for (int t = 0; t < steps; ++t) {
        const double beta = s.betas[t];
        const double alpha = 1.0 - beta;
        s.alphas.push_back(alpha);
        s.alpha_bars_prev.push_back(running);
        running *= alpha;
        s.alpha_bars.push_back(running);
        s.sqrt_alpha_bars.push_back(std::sqrt(running));
        s.sqrt_one_minus_alpha_bars.push_back(std::sqrt(1.0 - running));
        s.sqrt_recip_alpha_bars.push_back(std::sqrt(1.0 / running));
        s.sqrt_recipm1_alpha_bars.push_back(std::sqrt(1.0 / running - 1.0));
        const double prev = s.alpha_bars_prev.back();
        s.posterior_variance.push_back(beta * (1.0 - prev) / (1.0 - running));
        s.posterior_mean_coef1.push_back(beta * std::sqrt(prev) / (1.0 - running));
        s.posterior_mean_coef2.push_back((1.0 - prev) * std::sqrt(alpha) / (1.0 - running));
    }
    // The posterior variance is zero at t = 0; its log borrows the next step.
    for (int t = 0; t < steps; ++t) {
        const double v = t == 0 ? (steps > 1 ? s.posterior_variance[1] : s.betas[0]) : s.posterior_variance[t];
        s.posterior_log_variance_clipped.push_back(std::log(v));
    }
    return s;
}

NoiseSchedule linear_beta_schedule(int T, double beta_1, double beta_T)
{
    if (T < 1 || !(beta_1 > 0.0 && beta_1 < beta_T && beta_T < 1.0)) {
        throw ContractError("linear schedule needs T >= 1 and 0 < beta_1 < beta_T < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        betas[t] = T == 1 ? beta_1 : beta_1 + (beta_T - beta_1) * double(t) / double(T - 1);
    }
    betas.front() = beta_1;
    if (T > 1) {
        betas.back() = beta_T;
    }
    return schedule_from_betas(std::move(betas));
}

std::vector<int> space_timesteps(int T, int num_steps)
{
    if (num_steps < 1 || num_steps > T) {
        throw ContractError("num_steps " + std::to_string(num_steps) + " outside [1, " + std::to_string(T) + "]");
    }
    if (num_steps == 1) {
        return {T - 1};
    }
    std::vector<int> out;
    for (int i = 0; i < num_steps; ++i) {
        out.push_back(static_cast<int>(std::lround(double(i) * (T - 1) / (num_steps - 1))));
    }
    return out;
}

NoiseSchedule respace(const NoiseSchedule& base, int num_steps)
{
    const std::vector<int> keep = space_timesteps(base.T, num_steps);
    std::vector<double> betas;
    std::vector<int> map;
    int last = -1;
    for (int t : keep) {
        const auto k = static_cast<std::size_t>(t);
        if (t == last + 1) {
            betas.push_back(base.betas[k]);
        } else {
            const double prev = last < 0 ? 1.0 : base.alpha_bars[static_cast<std::size_t>(last)];
            betas.push_back(1.0 - base.alpha_bars[k] / prev);
        }
        map.push_back(base.timestep_map[k]);
        last = t;
    }
    return schedule_from_betas(std::move(betas), std::move(map));
}

} // namespace dis
