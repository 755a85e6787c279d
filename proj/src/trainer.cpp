#include "dis/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dis/heap.hpp"

namespace dis {

namespace {

struct Streams {
    Rng noise;
    Rng dropout;
};

std::string pack_state(const Streams& s, const BatchSampler& sampler)
{
    return s.noise.serialize() + "\n" + s.dropout.serialize() + "\n" + sampler.serialize();
}

void unpack_state(const std::string& text, Streams& s, BatchSampler& sampler)
{
    std::istringstream in(text);
    std::string noise;
    std::string dropout;
    if (!std::getline(in, noise) || !std::getline(in, dropout)) {
        throw FormatError("checkpoint rng state is malformed");
    }
    s.noise.deserialize(noise);
    s.dropout.deserialize(dropout);
    std::string rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    sampler.deserialize(rest);
}

double mean_of(const std::vector<double>& v, std::size_t first, std::size_t count)
{
    return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(first),
                           v.begin() + static_cast<std::ptrdiff_t>(first + count), 0.0) /
           double(count);
}

void clip_gradients(std::map<std::string, Tensor<float>>& grads, double max_norm)
{
    double total = 0;
    for (const auto& [name, g] : grads) {
        for (float v : g.values()) {
            total += double(v) * v;
        }
    }
    const double norm = std::sqrt(total);
    if (norm <= max_norm) {
        return;
    }
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads) {
        for (float& v : g.mutable_values()) {
            v = static_cast<float>(v * scale);
        }
    }
}

} // namespace

std::int64_t smoothing_window(std::int64_t steps)
{
    return std::min<std::int64_t>(100, std::max<std::int64_t>(1, steps / 10));
}

std::string metrics_row(std::int64_t step, double lr, double loss, double loss_simple, double loss_vlb,
                        double wall_ms)
{
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.3f", static_cast<long long>(step), lr, loss,
                  loss_simple, loss_vlb, wall_ms);
    return buf;
}

std::string checkpoint_name(std::int64_t step)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "checkpoint_%06lld.dis", static_cast<long long>(step));
    return buf;
}

TrainResult train(const RunConfig& config, const Dataset& data, const TrainOptions& options)
{
    config.validate();
    check_dataset(data, config.model);
    keep_heap_mapped();
    const auto& tc = config.train;
    const auto& mc = config.model;
    const NoiseSchedule schedule = config.schedule();

    Rng init_rng(tc.seed, 0);
    DisModel<float> model(mc, init_rng);
    auto& params = model.params();
    AdamW<float> adam(params, tc.adam);
    Ema<float> ema(params, tc.ema_decay);
    BatchSampler sampler(data, tc.seed, tc.hflip);
    Streams streams{Rng(tc.seed, 2), Rng(tc.seed, 4)};

    std::int64_t start = 0;
    if (options.resume_from) {
        const Checkpoint ckpt = load_checkpoint(*options.resume_from);
        restore_checkpoint(ckpt, config, params, adam, ema);
        unpack_state(ckpt.rng_state, streams, sampler);
        start = ckpt.step;
        if (start > tc.steps) {
            throw ConfigError("checkpoint is at step " + std::to_string(start) + ", beyond steps = " +
                              std::to_string(tc.steps));
        }
    }

    const bool to_disk = !options.out_dir.empty();
    std::ofstream metrics;
    if (to_disk) {
        std::filesystem::create_directories(options.out_dir);
        std::ofstream(options.out_dir / "config.txt") << emit_run_config(config);
        metrics.open(options.out_dir / "metrics.csv", std::ios::trunc);
        if (!metrics) {
            throw ConfigError("cannot write " + (options.out_dir / "metrics.csv").string());
        }
        metrics << kMetricsHeader << '\n';
    }

    TrainResult result;
    const std::vector<int> no_classes;
    for (std::int64_t step = start + 1; step <= tc.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = cosine_lr(step - 1, tc.steps, tc.lr);

        Batch batch = sampler.next(tc.batch);
        if (options.hooks.on_batch) {
            options.hooks.on_batch(step, batch);
        }
        std::vector<int> classes;
        if (mc.num_classes > 0) {
            classes = batch.labels;
            for (int& c : classes) {
                if (streams.dropout.uniform() < tc.cond_dropout) {
                    c = mc.null_class();
                }
            }
        }
        if (options.hooks.on_classes) {
            options.hooks.on_classes(step, classes);
        }
        const Tensor<float> x0({tc.batch, mc.H, mc.W, mc.C}, std::move(batch.pixels));

        LossTerms<float> terms;
        double loss = 0;
        try {
            terms = training_loss(model, schedule, x0, classes, streams.noise, config.diffusion.vlb_weight);
            loss = terms.loss.item();
            if (options.hooks.loss_filter) {
                loss = options.hooks.loss_filter(step, loss);
            }
            if (!std::isfinite(loss)) {
                throw NumericError("loss is " + std::to_string(loss) + " (lr " + std::to_string(lr) + ")");
            }
            auto grads = backward(terms.loss, params);
            if (tc.grad_clip > 0) {
                clip_gradients(grads, tc.grad_clip);
            }
            adam.step(params, grads, lr);
        } catch (const NumericError& e) {
            throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        ema.update(params);

        result.loss_simple.push_back(terms.loss_simple);
        const double wall_ms =
            tc.log_wall_time
                ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()
                : 0.0;
        if (to_disk) {
            metrics << metrics_row(step, lr, loss, terms.loss_simple, terms.loss_vlb, wall_ms) << '\n';
            metrics.flush();
        }
        if (options.hooks.on_step) {
            options.hooks.on_step(step, lr, loss);
        }
        const bool periodic = tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0;
        if (periodic || step == tc.steps) {
            result.last = capture_checkpoint(config, step, pack_state(streams, sampler), params, adam, ema);
            if (to_disk && periodic) {
                save_checkpoint(options.out_dir / checkpoint_name(step), result.last);
            }
        }
    }
    if (start == tc.steps) {
        result.last = capture_checkpoint(config, start, pack_state(streams, sampler), params, adam, ema);
    }
    if (to_disk) {
        result.final_checkpoint = options.out_dir / "final.dis";
        save_checkpoint(result.final_checkpoint, result.last);
    }

    const auto n = static_cast<std::int64_t>(result.loss_simple.size());
    if (n > 0) {
        result.window = std::min(smoothing_window(tc.steps), n);
        const auto w = static_cast<std::size_t>(result.window);
        result.smoothed_initial = mean_of(result.loss_simple, 0, w);
        result.smoothed_final = mean_of(result.loss_simple, static_cast<std::size_t>(n) - w, w);
    }
    return result;
}

} // namespace dis
