#include "dis/commands.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "dis/heap.hpp"
#include "dis/pnm.hpp"

namespace dis {

namespace {

std::string fmt(const char* format, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, format, v);
    return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) {
        throw ConfigError("cannot write " + path.string());
    }
}

std::uint64_t fnv1a(std::uint64_t hash, std::uint64_t value)
{
    for (int i = 0; i < 8; ++i) {
        hash ^= (value >> (8 * i)) & 0xffu;
        hash *= 0x100000001b3ull;
    }
    return hash;
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;

TrainHooks progress_hooks(std::int64_t steps, std::ostream& log)
{
    TrainHooks hooks;
    const std::int64_t every = std::max<std::int64_t>(1, steps / 20);
    hooks.on_step = [every, steps, &log](std::int64_t step, double lr, double loss) {
        if (step % every == 0 || step == steps) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "step %lld/%lld  lr %.3g  loss %.5f\n", static_cast<long long>(step),
                          static_cast<long long>(steps), lr, loss);
            log << buf << std::flush;
        }
    };
    return hooks;
}

} // namespace

RunConfig resolve_config(const std::optional<std::filesystem::path>& path, std::optional<std::uint64_t> seed,
                         std::optional<int> steps)
{
    RunConfig config = path ? load_run_config(*path) : toy_run_config();
    if (seed) {
        config.train.seed = *seed;
    }
    if (steps) {
        config.train.steps = *steps;
    }
    config.validate();
    return config;
}

TrainResult cmd_train(const TrainArgs& args, std::ostream& log)
{
    keep_heap_mapped();
    if (args.out.empty()) {
        throw ConfigError("train needs --out");
    }
    const RunConfig config = resolve_config(args.config, args.seed, args.steps);
    const Dataset data =
        load_dataset(config.train.dataset, static_cast<std::size_t>(config.train.dataset_size), config.train.seed);
    TrainOptions options;
    options.out_dir = args.out;
    options.resume_from = args.resume;
    options.hooks = progress_hooks(config.train.steps, log);
    TrainResult result = train(config, data, options);
    log << "smoothed loss_simple " << fmt("%.5f", result.smoothed_initial) << " -> "
        << fmt("%.5f", result.smoothed_final) << " (window " << result.window << ")\n";
    log << "wrote " << result.final_checkpoint.string() << "\n";
    return result;
}

std::vector<int> sample_classes(const ModelConfig& model, int n, std::optional<int> class_id)
{
    if (model.num_classes == 0) {
        if (class_id) {
            throw ConfigError("--class " + std::to_string(*class_id) +
                              " given but the model is unconditional (num_classes = 0)");
        }
        return {};
    }
    if (class_id && (*class_id < 0 || *class_id >= model.num_classes)) {
        throw ConfigError("--class " + std::to_string(*class_id) + " out of range: num_classes = " +
                          std::to_string(model.num_classes));
    }
    std::vector<int> classes;
    for (int k = 0; k < n; ++k) {
        classes.push_back(class_id ? *class_id : k % model.num_classes);
    }
    return classes;
}

SampleResult cmd_sample(const SampleArgs& args, std::ostream& log)
{
    keep_heap_mapped();
    if (args.out.empty()) {
        throw ConfigError("sample needs --out");
    }
    if (args.n < 1) {
        throw ConfigError("--n must be positive");
    }
    const Checkpoint ckpt = load_checkpoint(args.checkpoint);
    LoadedModel loaded = load_model(ckpt, !args.raw_weights);
    const ModelConfig& mc = loaded.config.model;

    SamplerConfig sampler = loaded.config.sampler;
    if (args.steps) {
        sampler.num_steps = *args.steps;
    }
    if (args.cfg_scale) {
        sampler.guidance_scale = *args.cfg_scale;
    }
    if (args.seed) {
        sampler.seed = *args.seed;
    }
    if (sampler.num_steps < 1 || sampler.num_steps > loaded.config.diffusion.T) {
        throw ConfigError("--steps must be in [1, " + std::to_string(loaded.config.diffusion.T) + "]");
    }
    if (sampler.guidance_scale < 1.0) {
        throw ConfigError("--cfg-scale must be >= 1");
    }
    const std::vector<int> classes = sample_classes(mc, args.n, args.class_id);

    std::filesystem::create_directories(args.out);
    SampleResult result;
    result.samples = ddpm_sample(loaded.model, loaded.config.schedule(), args.n, classes, sampler);

    const Index per = Index(mc.H) * mc.W * mc.C;
    const char* ext = mc.C == 1 ? ".pgm" : ".ppm";
    std::string manifest = "file,index,seed,class,steps,cfg_scale,weights\n";
    for (int k = 0; k < args.n; ++k) {
        const int cls = classes.empty() ? -1 : classes[static_cast<std::size_t>(k)];
        std::string name = "sample_" + std::to_string(sampler.seed) + "_" + std::to_string(k);
        name += cls >= 0 ? "_c" + std::to_string(cls) : "_uncond";
        name += ext;
        PnmImage img{mc.W, mc.H, mc.C, {}};
        for (Index i = 0; i < per; ++i) {
            img.pixels.push_back(to_byte(result.samples.values()[static_cast<std::size_t>(k * per + i)]));
        }
        write_pnm(args.out / name, img);
        result.images.push_back(args.out / name);
        result.classes.push_back(cls);
        manifest += name + "," + std::to_string(k) + "," + std::to_string(sampler.seed) + "," +
                    (cls >= 0 ? std::to_string(cls) : std::string("none")) + "," +
                    std::to_string(sampler.num_steps) + "," + fmt("%g", sampler.guidance_scale) + "," +
                    (args.raw_weights ? "raw" : "ema") + "\n";
    }
    write_text(args.out / "manifest.csv", manifest);
    log << "wrote " << args.n << " samples to " << args.out.string() << "\n";
    return result;
}

std::vector<Index> parse_j_list(const std::string& text)
{
    std::vector<Index> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        std::size_t used = 0;
        long long v = 0;
        try {
            v = std::stoll(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (item.empty() || used != item.size() || v < 1) {
            throw ConfigError("malformed J list '" + text + "': expected positive integers separated by commas");
        }
        out.push_back(v);
    }
    if (out.empty() || text.back() == ',') {
        throw ConfigError("malformed J list '" + text + "': expected positive integers separated by commas");
    }
    return out;
}

void cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& log)
{
    keep_heap_mapped();
    std::string csv;
    if (args.configs) {
        const auto reports = model_gflops_reports(true);
        log << gflops_table(reports);
        csv = "config,L,D,params,ref_params,macs,gflops,ref_gflops\n";
        char buf[256];
        for (const auto& r : reports) {
            std::snprintf(buf, sizeof buf, "%s,%d,%d,%lld,%.0f,%lld,%.6f,%.2f\n", r.name.c_str(), r.config.L,
                          r.config.D, static_cast<long long>(r.params), r.ref_params,
                          static_cast<long long>(r.macs), r.gflops, r.ref_gflops);
            csv += buf;
        }
    } else {
        const auto records = run_scaling_sweep(args.J, args.D, args.N, args.repeats);
        log << sweep_table(records);
        const ScalingSummary s = summarize_sweep(records);
        char buf[256];
        std::snprintf(buf, sizeof buf, "ssm: counts = %.6g * J, R^2 = %.10f, quadratic share %.2e\n",
                      s.ssm_linear.slope, s.ssm_linear.r2, s.ssm_quadratic_share);
        log << buf;
        std::snprintf(buf, sizeof buf, "attention: J^2 coefficient %.6g vs 2D = %.6g (%.2e relative)\n",
                      s.attention.c2, s.attention_c2_target, s.attention_c2_rel_error);
        log << buf;
        csv = sweep_csv(records);
    }
    if (args.out) {
        if (args.out->has_parent_path()) {
            std::filesystem::create_directories(args.out->parent_path());
        }
        write_text(*args.out, csv);
        log << "wrote " << args.out->string() << "\n";
    } else {
        out << csv;
    }
}

std::vector<AblationVariant> ablation_variants(const std::string& axis, const RunConfig& base)
{
    std::vector<AblationVariant> out;
    const auto add = [&](const std::string& value, const auto& edit) {
        AblationVariant v{axis + "_" + value, value, base};
        edit(v.config.model);
        v.config.validate();
        out.push_back(std::move(v));
    };
    if (axis == "patch") {
        for (int p : {2, 4, 8}) {
            add(std::to_string(p), [p](ModelConfig& m) { m.p = p; });
        }
    } else if (axis == "skip") {
        for (SkipMode mode : {SkipMode::concat, SkipMode::add, SkipMode::none}) {
            add(to_string(mode), [mode](ModelConfig& m) { m.skip_mode = mode; });
        }
    } else if (axis == "cond") {
        for (CondMode mode : {CondMode::token, CondMode::adaln}) {
            add(to_string(mode), [mode](ModelConfig& m) { m.cond_mode = mode; });
        }
    } else if (axis == "scale") {
        const std::pair<const char*, std::pair<int, int>> tiers[] = {{"xs", {3, 64}}, {"s", {5, 96}}, {"b", {5, 192}}};
        for (const auto& [name, shape] : tiers) {
            const auto [blocks, hidden] = shape;
            add(name, [blocks, hidden](ModelConfig& m) {
                m.L = blocks;
                m.D = hidden;
            });
        }
    } else {
        throw ConfigError("unknown ablation axis '" + axis + "' (expected patch, skip, cond or scale)");
    }
    return out;
}

std::vector<AblationRow> cmd_ablate(const AblateArgs& args, std::ostream& log)
{
    keep_heap_mapped();
    if (args.out.empty()) {
        throw ConfigError("ablate needs --out");
    }
    const RunConfig base = resolve_config(args.config, args.seed, args.steps);
    const auto variants = ablation_variants(args.axis, base);
    const Dataset data =
        load_dataset(base.train.dataset, static_cast<std::size_t>(base.train.dataset_size), base.train.seed);
    std::filesystem::create_directories(args.out);

    std::vector<AblationRow> rows;
    std::string summary = std::string(kAblationHeader) + "\n";
    for (const auto& variant : variants) {
        log << "== " << variant.name << "\n";
        AblationRow row{variant, param_count(variant.config.model), {}, kFnvOffset};
        TrainOptions options;
        options.out_dir = args.out / variant.name;
        options.hooks = progress_hooks(variant.config.train.steps, log);
        options.hooks.on_batch = [&row](std::int64_t, const Batch& batch) {
            for (std::size_t i : batch.indices) {
                row.data_order_hash = fnv1a(row.data_order_hash, i);
            }
        };
        row.result = train(variant.config, data, options);
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%s,%s,%lld,%d,%.9g,%.9g,%016llx\n", variant.name.c_str(),
                      args.axis.c_str(), variant.value.c_str(), static_cast<long long>(row.params),
                      variant.config.train.steps, row.result.smoothed_initial, row.result.smoothed_final,
                      static_cast<unsigned long long>(row.data_order_hash));
        summary += buf;
        rows.push_back(std::move(row));
    }
    write_text(args.out / "summary.csv", summary);
    log << summary;
    return rows;
}

std::optional<ScaleRow> matching_scale_row(const ModelConfig& config)
{
    for (const auto& row : scale_rows()) {
        const ModelConfig& r = row.config;
        if (config.L == r.L && config.D == r.D && config.E == r.E && config.N == r.N && config.p == r.p &&
            config.H == r.H && config.W == r.W && config.C == r.C && config.num_classes == r.num_classes) {
            return row;
        }
    }
    return std::nullopt;
}

std::string cmd_inspect(const std::filesystem::path& checkpoint)
{
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    const RunConfig config = checkpoint_config(ckpt);
    std::ostringstream out;
    out << "checkpoint " << checkpoint.string() << " (format version " << int(kCheckpointVersion) << ")\n";
    out << "step " << ckpt.step << ", optimizer steps " << ckpt.adam_steps << "\n\n";
    out << "config:\n" << ckpt.config_text << "\n";

    std::vector<std::pair<std::string, Index>> groups;
    Index total = 0;
    for (const auto& rec : ckpt.params) {
        const std::string component = rec.name.substr(0, rec.name.find('.'));
        if (groups.empty() || groups.back().first != component) {
            groups.emplace_back(component, 0);
        }
        const auto n = static_cast<Index>(rec.data.size());
        groups.back().second += n;
        total += n;
    }
    out << "parameters by component:\n";
    char buf[256];
    for (const auto& [name, count] : groups) {
        std::snprintf(buf, sizeof buf, "  %-16s %14lld\n", name.c_str(), static_cast<long long>(count));
        out << buf;
    }
    std::snprintf(buf, sizeof buf, "  %-16s %14lld (%.2fM)\n", "total", static_cast<long long>(total),
                  double(total) / 1e6);
    out << buf;
    const Index expected = param_count(config.model);
    if (expected != total) {
        throw FormatError("checkpoint holds " + std::to_string(total) + " parameters, config implies " +
                          std::to_string(expected));
    }
    if (const auto row = matching_scale_row(config.model)) {
        std::snprintf(buf, sizeof buf, "scaling-table row %s, paper: %.1fM (%+.1f%%)\n", row->name.c_str(),
                      row->ref_params / 1e6, 100.0 * (double(total) / row->ref_params - 1.0));
        out << buf;
    }
    return out.str();
}

} // namespace dis
