#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dis/bench.hpp"
#include "dis/trainer.hpp"

namespace dis {

/// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumeric = 2;

/// Resolved config: the file when given, else the toy config; then overrides.
RunConfig resolve_config(const std::optional<std::filesystem::path>& path, std::optional<std::uint64_t> seed,
                         std::optional<int> steps);

struct TrainArgs {
    std::optional<std::filesystem::path> config;
    std::filesystem::path out;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::optional<std::filesystem::path> resume;
};

TrainResult cmd_train(const TrainArgs& args, std::ostream& log);

struct SampleArgs {
    std::filesystem::path checkpoint;
    std::filesystem::path out;
    int n = 4;
    std::optional<int> steps;
    std::optional<double> cfg_scale;
    std::optional<std::uint64_t> seed;
    std::optional<int> class_id;
    bool raw_weights = false; // sample with the optimizer weights instead of EMA
};

struct SampleResult {
    std::vector<std::filesystem::path> images;
    std::vector<int> classes; // -1 for unconditional models
    Tensor<float> samples;    // [n, H, W, C] in [-1, 1] before quantisation
};

/// Writes sample_<seed>_<k>_c<class>.pgm/.ppm (or _uncond) and manifest.csv.
SampleResult cmd_sample(const SampleArgs& args, std::ostream& log);

/// Class id per sample: the requested class for all, else k mod num_classes;
/// empty for unconditional models. ConfigError naming num_classes when the
/// requested class is out of range.
std::vector<int> sample_classes(const ModelConfig& model, int n, std::optional<int> class_id);

struct BenchArgs {
    std::vector<Index> J{64, 128, 256, 512};
    Index D = 384;
    Index N = 16;
    int repeats = 5;
    bool configs = false;
    std::optional<std::filesystem::path> out; // CSV path; stdout when absent
};

/// "64,128,256" -> {64, 128, 256}. ConfigError on anything else.
std::vector<Index> parse_j_list(const std::string& text);

void cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& log);

inline constexpr const char* kAblationHeader =
    "variant,axis,value,params,steps,smoothed_initial,smoothed_final,data_order_hash";

struct AblationVariant {
    std::string name;  // directory name, e.g. skip_concat
    std::string value; // axis value
    RunConfig config;
};

struct AblateArgs {
    std::string axis;
    std::optional<std::filesystem::path> config;
    std::filesystem::path out;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
};

struct AblationRow {
    AblationVariant variant;
    Index params = 0;
    TrainResult result;
    std::uint64_t data_order_hash = 0;
};

/// Variant set for an axis: patch {2, 4, 8}, skip {concat, add, none},
/// cond {token, adaln}, scale {xs, s, b}. ConfigError on an unknown axis.
std::vector<AblationVariant> ablation_variants(const std::string& axis, const RunConfig& base);

std::vector<AblationRow> cmd_ablate(const AblateArgs& args, std::ostream& log);

/// Scaling-table row whose architecture the config reproduces, if any.
std::optional<ScaleRow> matching_scale_row(const ModelConfig& config);

std::string cmd_inspect(const std::filesystem::path& checkpoint);

} // namespace dis
