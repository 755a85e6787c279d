#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dis/commands.hpp"
#include "dis/heap.hpp"

using namespace dis;

int main(int argc, char** argv)
{
    keep_heap_mapped();
    CLI::App app{"Diffusion state space models: train, sample, bench, ablate, inspect"};
    app.require_subcommand(1);

    TrainArgs train_args;
    std::optional<std::string> train_config;
    std::optional<std::string> train_resume;
    auto* train_cmd = app.add_subcommand("train", "train a model and write a run directory");
    train_cmd->add_option("--config", train_config, "run config file (default: toy config)");
    train_cmd->add_option("--out", train_args.out, "run directory")->required();
    train_cmd->add_option("--seed", train_args.seed, "override train seed");
    train_cmd->add_option("--steps", train_args.steps, "override step count");
    train_cmd->add_option("--resume", train_resume, "checkpoint to resume from");

    SampleArgs sample_args;
    auto* sample_cmd = app.add_subcommand("sample", "draw images from a checkpoint");
    sample_cmd->add_option("checkpoint,--checkpoint", sample_args.checkpoint, "checkpoint file")->required();
    sample_cmd->add_option("--out", sample_args.out, "output directory")->required();
    sample_cmd->add_option("--n", sample_args.n, "number of images")->capture_default_str();
    sample_cmd->add_option("--steps", sample_args.steps, "sampling steps (default from config)");
    sample_cmd->add_option("--cfg-scale", sample_args.cfg_scale, "classifier-free guidance scale");
    sample_cmd->add_option("--seed", sample_args.seed, "sampler seed");
    sample_cmd->add_option("--class", sample_args.class_id, "class id for every image");
    sample_cmd->add_flag("--raw-weights", sample_args.raw_weights, "use optimizer weights instead of EMA");

    BenchArgs bench_args;
    std::string j_list;
    std::optional<std::string> bench_out;
    auto* bench_cmd = app.add_subcommand("bench", "MAC counts and timings for the scan and attention");
    bench_cmd->add_option("--J", j_list, "comma-separated sequence lengths (default 64,128,256,512)");
    bench_cmd->add_option("--D", bench_args.D, "hidden width")->capture_default_str();
    bench_cmd->add_option("--N", bench_args.N, "state size")->capture_default_str();
    bench_cmd->add_option("--repeats", bench_args.repeats, "timing repeats per point")->capture_default_str();
    bench_cmd->add_flag("--configs", bench_args.configs, "parameter and Gflops report for S/B/M/L/H");
    bench_cmd->add_option("--out", bench_out, "CSV path (default stdout)");

    AblateArgs ablate_args;
    std::optional<std::string> ablate_config;
    auto* ablate_cmd = app.add_subcommand("ablate", "train every variant along one axis");
    ablate_cmd->add_option("--axis", ablate_args.axis, "patch, skip, cond or scale")->required();
    ablate_cmd->add_option("--config", ablate_config, "base run config (default: toy config)");
    ablate_cmd->add_option("--out", ablate_args.out, "output directory")->required();
    ablate_cmd->add_option("--seed", ablate_args.seed, "override train seed");
    ablate_cmd->add_option("--steps", ablate_args.steps, "override step count");

    std::string inspect_path;
    auto* inspect_cmd = app.add_subcommand("inspect", "print config and parameter inventory of a checkpoint");
    inspect_cmd->add_option("checkpoint,--checkpoint", inspect_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*train_cmd) {
            if (train_config) {
                train_args.config = *train_config;
            }
            if (train_resume) {
                train_args.resume = *train_resume;
            }
            cmd_train(train_args, std::cout);
        } else if (*sample_cmd) {
            cmd_sample(sample_args, std::cout);
        } else if (*bench_cmd) {
            if (!j_list.empty()) {
                bench_args.J = parse_j_list(j_list);
            }
            if (bench_out) {
                bench_args.out = *bench_out;
            }
            cmd_bench(bench_args, std::cout, std::cerr);
        } else if (*ablate_cmd) {
            if (ablate_config) {
                ablate_args.config = *ablate_config;
            }
            cmd_ablate(ablate_args, std::cout);
        } else if (*inspect_cmd) {
            std::cout << cmd_inspect(inspect_path);
        }
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitOk;
}
