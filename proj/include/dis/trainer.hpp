#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dis/checkpoint.hpp"
#include "dis/dataset.hpp"
#include "dis/run_config.hpp"

namespace dis {

inline constexpr const char* kMetricsHeader = "step,lr,loss,loss_simple,loss_vlb,wall_ms";

struct TrainHooks {
    /// Class ids handed to the model for each step, after condition dropout.
    std::function<void(std::int64_t step, const std::vector<int>& classes)> on_classes;
    /// Replaces the computed loss value check; lets tests force a non-finite loss.
    std::function<double(std::int64_t step, double loss)> loss_filter;
    /// Dataset indices drawn for each step.
    std::function<void(std::int64_t step, const Batch& batch)> on_batch;
    /// Called after each completed step with its lr and total loss.
    std::function<void(std::int64_t step, double lr, double loss)> on_step;
};

struct TrainOptions {
    std::filesystem::path out_dir; // empty: keep everything in memory
    std::optional<std::filesystem::path> resume_from;
    TrainHooks hooks;
};

struct TrainResult {
    std::vector<double> loss_simple; // one entry per step run
    double smoothed_initial = 0;
    double smoothed_final = 0;
    std::int64_t window = 0;
    std::filesystem::path final_checkpoint;
    Checkpoint last; // state after the final step
};

/// Smoothing window for a run of `steps` steps: min(100, max(1, steps / 10)).
std::int64_t smoothing_window(std::int64_t steps);

/// Runs config.train.steps optimizer steps. Writes config.txt, metrics.csv,
/// checkpoint_<step>.dis every checkpoint_every steps and final.dis under
/// out_dir. Throws NumericError naming the step on a non-finite loss or
/// gradient.
TrainResult train(const RunConfig& config, const Dataset& data, const TrainOptions& options = {});

std::string metrics_row(std::int64_t step, double lr, double loss, double loss_simple, double loss_vlb,
                        double wall_ms);

std::string checkpoint_name(std::int64_t step);

} // namespace dis
