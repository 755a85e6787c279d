#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dis/model.hpp"
#include "dis/optim.hpp"
#include "dis/run_config.hpp"

namespace dis {

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'S', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    Shape shape;
    std::vector<float> data;

    bool operator==(const TensorRecord&) const = default;
};

/// Everything needed to resume training or sample. All integers and floats
/// are little-endian; tensor payloads are float32.
struct Checkpoint {
    std::string config_text; // emit_run_config output
    std::int64_t step = 0;
    std::string rng_state;
    std::int64_t adam_steps = 0;
    AdamWConfig adam;
    double ema_decay = 0;
    std::vector<TensorRecord> params;
    std::vector<TensorRecord> adam_m;
    std::vector<TensorRecord> adam_v;
    std::vector<TensorRecord> ema;

    bool operator==(const Checkpoint&) const = default;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// FormatError on bad magic, unknown version, truncation or trailing bytes.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Resolved run config stored in the checkpoint.
RunConfig checkpoint_config(const Checkpoint& ckpt);

Checkpoint capture_checkpoint(const RunConfig& config, std::int64_t step, const std::string& rng_state,
                              const ParameterSet<float>& params, const AdamW<float>& adam, const Ema<float>& ema);

/// Copies the named tables into live state. ConfigError when the stored model
/// config differs from `config.model`; FormatError on table mismatches.
void restore_checkpoint(const Checkpoint& ckpt, const RunConfig& config, ParameterSet<float>& params,
                        AdamW<float>& adam, Ema<float>& ema);

/// Model rebuilt from the stored config, with EMA (default) or raw weights.
struct LoadedModel {
    RunConfig config;
    DisModel<float> model;
};
LoadedModel load_model(const Checkpoint& ckpt, bool use_ema = true);

} // namespace dis
