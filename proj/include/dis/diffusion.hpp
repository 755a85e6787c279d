#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "dis/model.hpp"

namespace dis {

/// Precomputed 64-bit schedule. `timestep_map[i]` is the model-facing
/// timestep of step i (the identity unless respaced).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
    std::vector<double> alpha_bars_prev;
    std::vector<double> sqrt_alpha_bars;
    std::vector<double> sqrt_one_minus_alpha_bars;
    std::vector<double> sqrt_recip_alpha_bars;
    std::vector<double> sqrt_recipm1_alpha_bars;
    std::vector<double> posterior_variance;
    std::vector<double> posterior_log_variance_clipped;
    std::vector<double> posterior_mean_coef1;
    std::vector<double> posterior_mean_coef2;
    std::vector<int> timestep_map;
};

NoiseSchedule schedule_from_betas(std::vector<double> betas, std::vector<int> timestep_map = {});
NoiseSchedule linear_beta_schedule(int T = 1000, double beta_1 = 1e-4, double beta_T = 2e-2);

/// Evenly spaced subset of [0, T) including 0 and T-1.
std::vector<int> space_timesteps(int T, int num_steps);

/// Schedule over the spaced subset. Consecutive original steps keep their
/// beta bit-for-bit, so num_steps == T reproduces the base schedule exactly.
NoiseSchedule respace(const NoiseSchedule& base, int num_steps);

namespace detail {

template <typename Scalar>
Tensor<Scalar> per_sample(const std::vector<double>& table, const std::vector<int>& steps, Index rank)
{
    std::vector<Scalar> v;
    v.reserve(steps.size());
    for (int t : steps) {
        v.push_back(static_cast<Scalar>(table[static_cast<std::size_t>(t)]));
    }
    Shape shape(static_cast<std::size_t>(rank), 1);
    shape[0] = static_cast<Index>(steps.size());
    return Tensor<Scalar>(std::move(shape), std::move(v));
}

inline double std_normal_cdf(double x)
{
    return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

inline double std_normal_pdf(double x)
{
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

} // namespace detail

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps with one timestep per sample.
template <typename Scalar>
Tensor<Scalar> q_sample(const NoiseSchedule& s, const Tensor<Scalar>& x0, const std::vector<int>& timesteps,
                        const Tensor<Scalar>& eps)
{
    if (eps.shape() != x0.shape()) {
        throw ShapeError("q_sample: eps " + to_string(eps.shape()) + " vs x0 " + to_string(x0.shape()));
    }
    if (x0.rank() < 1 || static_cast<Index>(timesteps.size()) != x0.dim(0)) {
        throw ContractError("q_sample needs one timestep per sample");
    }
    for (int t : timesteps) {
        if (t < 0 || t >= s.T) {
            throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(s.T) + ")");
        }
    }
    return x0 * detail::per_sample<Scalar>(s.sqrt_alpha_bars, timesteps, x0.rank()) +
           eps * detail::per_sample<Scalar>(s.sqrt_one_minus_alpha_bars, timesteps, x0.rank());
}

/// Negative log-likelihood in bits of x (in [-1, 1], 256 levels) under a
/// discretized Gaussian. Differentiable in `log_var` only.
template <typename Scalar>
Tensor<Scalar> discretized_gaussian_nll(const Tensor<Scalar>& x, const Tensor<Scalar>& mean,
                                        const Tensor<Scalar>& log_var)
{
    if (x.shape() != mean.shape() || x.shape() != log_var.shape()) {
        throw ShapeError("discretized_gaussian_nll shapes differ");
    }
    constexpr double half_bin = 1.0 / 255.0;
    constexpr double floor = 1e-12;
    const std::size_t n = static_cast<std::size_t>(x.numel());
    std::vector<Scalar> out(n);
    std::vector<double> slope(n); // d nll / d log_var
    for (std::size_t i = 0; i < n; ++i) {
        const double xi = x.values()[i];
        const double inv_std = std::exp(-0.5 * double(log_var.values()[i]));
        const double centered = xi - double(mean.values()[i]);
        const double hi = inv_std * (centered + half_bin);
        const double lo = inv_std * (centered - half_bin);
        double prob = 0;
        double dprob = 0; // d prob / d log_var
        if (xi < -0.999) {
            prob = detail::std_normal_cdf(hi);
            dprob = detail::std_normal_pdf(hi) * (-0.5 * hi);
        } else if (xi > 0.999) {
            prob = 1.0 - detail::std_normal_cdf(lo);
            dprob = -detail::std_normal_pdf(lo) * (-0.5 * lo);
        } else {
            prob = detail::std_normal_cdf(hi) - detail::std_normal_cdf(lo);
            dprob = detail::std_normal_pdf(hi) * (-0.5 * hi) - detail::std_normal_pdf(lo) * (-0.5 * lo);
        }
        const bool clamped = prob < floor;
        out[i] = static_cast<Scalar>(-std::log(clamped ? floor : prob) / std::numbers::ln2);
        slope[i] = clamped ? 0.0 : -dprob / prob / std::numbers::ln2;
    }
    return detail::make_result(x.shape(), std::move(out), {&log_var},
                               [slope = std::move(slope)](Node<Scalar>& self) {
                                   Scalar* g = detail::input_grad(self, 0);
                                   for (std::size_t i = 0; i < slope.size(); ++i) {
                                       g[i] += static_cast<Scalar>(slope[i]) * self.grad[i];
                                   }
                               });
}

template <typename Scalar>
struct LossTerms {
    Tensor<Scalar> loss; // scalar, differentiable
    double loss_simple = 0;
    double loss_vlb = 0; // T * E_t[L_t] in bits per dimension
};

/// Hybrid objective at given timesteps and noise. The variational term sees a
/// detached mean so its gradient reaches only the variance output.
template <typename Scalar>
LossTerms<Scalar> training_loss_at(NoisePredictor<Scalar>& model, const NoiseSchedule& s, const Tensor<Scalar>& x0,
                                   const std::vector<int>& classes, const std::vector<int>& timesteps,
                                   const Tensor<Scalar>& eps, double vlb_weight = 1e-3)
{
    const Index rank = x0.rank();
    const auto coef = [&](const std::vector<double>& table) {
        return detail::per_sample<Scalar>(table, timesteps, rank);
    };
    const Tensor<Scalar> x_t = q_sample(s, x0, timesteps, eps).detach();
    std::vector<int> model_t;
    for (int t : timesteps) {
        model_t.push_back(s.timestep_map[static_cast<std::size_t>(t)]);
    }
    const ModelOutput<Scalar> out = model.predict(x_t, model_t, classes);

    LossTerms<Scalar> terms;
    const Tensor<Scalar> simple = mean(square(out.eps - eps));
    terms.loss_simple = double(simple.item());
    if (!model.config().learn_sigma) {
        terms.loss = simple;
        return terms;
    }

    const Tensor<Scalar> eps_hat = out.eps.detach();
    const Tensor<Scalar> x0_hat = x_t * coef(s.sqrt_recip_alpha_bars) - eps_hat * coef(s.sqrt_recipm1_alpha_bars);
    const Tensor<Scalar> mean_p = x0_hat * coef(s.posterior_mean_coef1) + x_t * coef(s.posterior_mean_coef2);
    const Tensor<Scalar> mean_q = x0 * coef(s.posterior_mean_coef1) + x_t * coef(s.posterior_mean_coef2);
    const Tensor<Scalar> logvar_q = coef(s.posterior_log_variance_clipped);

    std::vector<double> log_betas(s.betas.size());
    std::vector<double> log_span(s.betas.size());
    for (std::size_t i = 0; i < s.betas.size(); ++i) {
        log_betas[i] = std::log(s.betas[i]);
        log_span[i] = log_betas[i] - s.posterior_log_variance_clipped[i];
    }
    const Tensor<Scalar> frac = (out.v + Scalar(1)) * Scalar(0.5);
    const Tensor<Scalar> logvar_p = frac * coef(log_span) + coef(s.posterior_log_variance_clipped);

    const Tensor<Scalar> gap = (mean_q - mean_p).detach();
    const Tensor<Scalar> kl = (logvar_p - logvar_q + exp(logvar_q - logvar_p) + square(gap) * exp(-logvar_p) +
                               Scalar(-1)) *
                              Scalar(0.5 / std::numbers::ln2);
    const Tensor<Scalar> nll = discretized_gaussian_nll(x0, mean_p.detach(), logvar_p);

    std::vector<double> is_first(s.betas.size(), 0.0);
    std::vector<double> is_later(s.betas.size(), 1.0);
    is_first[0] = 1.0;
    is_later[0] = 0.0;
    const Tensor<Scalar> vlb = mean(kl * coef(is_later) + nll * coef(is_first));
    terms.loss_vlb = double(s.T) * double(vlb.item());
    terms.loss = simple + vlb * static_cast<Scalar>(vlb_weight * s.T);
    return terms;
}

/// Draws t ~ U{0..T-1} for every sample, then eps ~ N(0, I).
template <typename Scalar>
LossTerms<Scalar> training_loss(NoisePredictor<Scalar>& model, const NoiseSchedule& s, const Tensor<Scalar>& x0,
                                const std::vector<int>& classes, Rng& rng, double vlb_weight = 1e-3)
{
    std::vector<int> timesteps(static_cast<std::size_t>(x0.dim(0)));
    for (auto& t : timesteps) {
        t = rng.uniform_int(0, s.T - 1);
    }
    const Tensor<Scalar> eps(x0.shape(), rng.normal_vector<Scalar>(static_cast<std::size_t>(x0.numel())));
    return training_loss_at(model, s, x0, classes, timesteps, eps, vlb_weight);
}

// ---------------------------------------------------------------------------
// Ancestral sampling

struct SamplerConfig {
    int num_steps = 250;
    double guidance_scale = 1.0;
    std::uint64_t seed = 0;
    double clip_range = 1.0;
    int batch_size = 16;

    bool operator==(const SamplerConfig&) const = default;
};

/// Classifier-free guidance on the noise output; the variance output comes
/// from the conditional pass. One model call when s == 1 or the model is
/// unconditional, two otherwise.
template <typename Scalar>
ModelOutput<Scalar> guided_prediction(NoisePredictor<Scalar>& model, const Tensor<Scalar>& x,
                                      const std::vector<int>& timesteps, const std::vector<int>& classes,
                                      double guidance_scale)
{
    const auto& c = model.config();
    if (c.num_classes == 0 || guidance_scale == 1.0) {
        return model.predict(x, timesteps, classes);
    }
    const ModelOutput<Scalar> cond = model.predict(x, timesteps, classes);
    const ModelOutput<Scalar> uncond =
        model.predict(x, timesteps, std::vector<int>(timesteps.size(), c.null_class()));
    return {uncond.eps + (cond.eps - uncond.eps) * static_cast<Scalar>(guidance_scale), cond.v};
}

/// One reverse step at schedule index i. `rngs` holds one stream per sample.
template <typename Scalar>
Tensor<Scalar> p_sample_step(NoisePredictor<Scalar>& model, const NoiseSchedule& s, const Tensor<Scalar>& x_t, int i,
                             const std::vector<int>& classes, double guidance_scale, double clip_range,
                             std::vector<Rng>& rngs)
{
    if (i < 0 || i >= s.T) {
        throw ContractError("sampler index " + std::to_string(i) + " outside [0, " + std::to_string(s.T) + ")");
    }
    const Index batch = x_t.dim(0);
    const Index per = x_t.numel() / std::max<Index>(batch, 1);
    if (static_cast<Index>(rngs.size()) != batch) {
        throw ContractError("p_sample_step needs one rng per sample");
    }
    const std::vector<int> model_t(static_cast<std::size_t>(batch), s.timestep_map[static_cast<std::size_t>(i)]);
    const ModelOutput<Scalar> out = guided_prediction(model, x_t, model_t, classes, guidance_scale);

    const auto k = static_cast<std::size_t>(i);
    const double log_beta = std::log(s.betas[k]);
    const double log_tilde = s.posterior_log_variance_clipped[k];
    std::vector<Scalar> next(static_cast<std::size_t>(x_t.numel()));
    for (Index b = 0; b < batch; ++b) {
        for (Index j = 0; j < per; ++j) {
            const auto e = static_cast<std::size_t>(b * per + j);
            const double x = x_t.values()[e];
            const double eps = out.eps.values()[e];
            const double v = out.v.defined() ? double(out.v.values()[e]) : -1.0;
            if (!std::isfinite(eps) || !std::isfinite(v)) {
                throw NumericError("non-finite model output at sampler step " + std::to_string(i));
            }
            double x0 = s.sqrt_recip_alpha_bars[k] * x - s.sqrt_recipm1_alpha_bars[k] * eps;
            if (clip_range > 0) {
                x0 = std::clamp(x0, -clip_range, clip_range);
            }
            const double mean = s.posterior_mean_coef1[k] * x0 + s.posterior_mean_coef2[k] * x;
            const double frac = 0.5 * (v + 1.0);
            const double log_var = frac * log_beta + (1.0 - frac) * log_tilde;
            double value = mean;
            if (i > 0) {
                value += std::exp(0.5 * log_var) * rngs[static_cast<std::size_t>(b)].normal();
            }
            next[e] = static_cast<Scalar>(value);
        }
    }
    return Tensor<Scalar>(x_t.shape(), std::move(next));
}

/// Runs the full reverse chain of `s` from pure noise. Sample k draws from
/// Rng(seed, k) regardless of batching.
template <typename Scalar>
Tensor<Scalar> sample_loop(NoisePredictor<Scalar>& model, const NoiseSchedule& s, int n,
                           const std::vector<int>& classes, const SamplerConfig& cfg)
{
    const auto& c = model.config();
    if (!classes.empty() && static_cast<int>(classes.size()) != n) {
        throw ContractError("expected " + std::to_string(n) + " class ids, got " + std::to_string(classes.size()));
    }
    for (int cls : classes) {
        if (cls < 0 || cls > c.num_classes) {
            throw ContractError("class " + std::to_string(cls) + " outside [0, " + std::to_string(c.num_classes) +
                                "]");
        }
    }
    NoGradGuard no_grad;
    const Index per = Index(c.H) * c.W * c.C;
    std::vector<Scalar> all;
    all.reserve(static_cast<std::size_t>(n * per));
    const int chunk = std::max(1, cfg.batch_size);
    for (int start = 0; start < n; start += chunk) {
        const int count = std::min(chunk, n - start);
        std::vector<Rng> rngs;
        std::vector<Scalar> init;
        for (int b = 0; b < count; ++b) {
            rngs.emplace_back(cfg.seed, static_cast<std::uint64_t>(start + b));
            const auto noise = rngs.back().normal_vector<Scalar>(static_cast<std::size_t>(per));
            init.insert(init.end(), noise.begin(), noise.end());
        }
        const std::vector<int> chunk_classes =
            classes.empty() ? std::vector<int>{} : std::vector<int>(classes.begin() + start, classes.begin() + start + count);
        Tensor<Scalar> x({count, c.H, c.W, c.C}, std::move(init));
        for (int i = s.T - 1; i >= 0; --i) {
            x = p_sample_step(model, s, x, i, chunk_classes, cfg.guidance_scale, cfg.clip_range, rngs);
        }
        all.insert(all.end(), x.values().begin(), x.values().end());
    }
    return Tensor<Scalar>({n, c.H, c.W, c.C}, std::move(all));
}

/// Respaced ancestral sampling: [n, H, W, C].
template <typename Scalar>
Tensor<Scalar> ddpm_sample(NoisePredictor<Scalar>& model, const NoiseSchedule& base, int n,
                           const std::vector<int>& classes, const SamplerConfig& cfg)
{
    return sample_loop(model, respace(base, cfg.num_steps), n, classes, cfg);
}

} // namespace dis
