#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "dis/diffusion.hpp"
#include "dis/model.hpp"
#include "dis/optim.hpp"

namespace dis {

struct DiffusionConfig {
    int T = 1000;
    double beta_1 = 1e-4;
    double beta_T = 2e-2;
    double vlb_weight = 1e-3;

    bool operator==(const DiffusionConfig&) const = default;
};

struct TrainConfig {
    std::uint64_t seed = 0;
    int steps = 2000;
    int batch = 64;
    double lr = 1e-4;
    AdamWConfig adam;
    double ema_decay = 0.9999;
    double cond_dropout = 0.1;
    double grad_clip = 0.0; // 0 disables clipping
    int checkpoint_every = 500;
    std::string dataset = "two-gaussians-8x8";
    int dataset_size = 4096;
    bool hflip = false;
    bool log_wall_time = false;

    bool operator==(const TrainConfig&) const = default;
};

struct RunConfig {
    ModelConfig model;
    DiffusionConfig diffusion;
    TrainConfig train;
    SamplerConfig sampler;

    void validate() const;
    bool operator==(const RunConfig&) const = default;
    NoiseSchedule schedule() const
    {
        return linear_beta_schedule(diffusion.T, diffusion.beta_1, diffusion.beta_T);
    }
};

/// DiS-XS on the builtin two-gaussians set: L=3, D=64, p=2, 8x8x1, 2 classes.
RunConfig toy_run_config();

/// `key = value` lines; '#' starts a comment. Unknown or repeated keys and
/// unparsable values throw ConfigError naming the line.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Every key in a fixed order; parse(emit(c)) == c.
std::string emit_run_config(const RunConfig& config);

} // namespace dis
