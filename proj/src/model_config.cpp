#include "dis/model.hpp"

#include <map>

namespace dis {

std::string to_string(CondMode mode)
{
    return mode == CondMode::token ? "token" : "adaln";
}

std::string to_string(SkipMode mode)
{
    switch (mode) {
    case SkipMode::concat:
        return "concat";
    case SkipMode::add:
        return "add";
    case SkipMode::none:
        return "none";
    }
    return "none";
}

CondMode parse_cond_mode(const std::string& text)
{
    if (text == "token") {
        return CondMode::token;
    }
    if (text == "adaln") {
        return CondMode::adaln;
    }
    throw ConfigError("cond_mode must be token or adaln, got '" + text + "'");
}

SkipMode parse_skip_mode(const std::string& text)
{
    if (text == "concat") {
        return SkipMode::concat;
    }
    if (text == "add") {
        return SkipMode::add;
    }
    if (text == "none") {
        return SkipMode::none;
    }
    throw ConfigError("skip_mode must be concat, add or none, got '" + text + "'");
}

void ModelConfig::validate() const
{
    const auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
    if (L < 1 || L % 2 == 0) {
        fail("L must be odd and positive, got " + std::to_string(L));
    }
    if (D < 1 || E < 1 || N < 1) {
        fail("D, E and N must be positive");
    }
    if (p != 2 && p != 4 && p != 8) {
        fail("p must be 2, 4 or 8, got " + std::to_string(p));
    }
    if (H < 1 || W < 1 || C < 1) {
        fail("image geometry must be positive");
    }
    if (H % p != 0 || W % p != 0) {
        fail(std::to_string(H) + "x" + std::to_string(W) + " is not divisible by p=" + std::to_string(p));
    }
    if (num_classes < 0) {
        fail("num_classes must be >= 0");
    }
    if (conv_kernel < 1 || dt_rank < 0) {
        fail("conv_kernel must be positive and dt_rank non-negative");
    }
    if (freq_dim < 2 || freq_dim % 2 != 0) {
        fail("freq_dim must be even and >= 2");
    }
    if (num_timesteps < 1) {
        fail("num_timesteps must be positive");
    }
}

std::vector<ScaleRow> scale_rows()
{
    const auto row = [](std::string name, int blocks, int hidden, double params, double gflops) {
        ModelConfig c;
        c.L = blocks;
        c.D = hidden;
        c.E = 2;
        c.N = 16;
        c.p = 4;
        c.H = 32;
        c.W = 32;
        c.C = 3;
        c.num_classes = 0;
        return ScaleRow{std::move(name), c, params, gflops};
    };
    return {row("S", 25, 384, 28.4e6, 0.43), row("B", 25, 768, 119.1e6, 1.86), row("M", 49, 768, 229.4e6, 3.70),
            row("L", 49, 1024, 404.0e6, 6.57), row("H", 49, 1536, 900.6e6, 14.79)};
}

std::vector<ParamSpec> param_inventory(const ModelConfig& c)
{
    c.validate();
    const Index d = c.D;
    const Index inner = c.inner();
    const Index state = c.N;
    const Index rank = c.rank();
    std::vector<ParamSpec> out = {
        {"patch_embed.weight", {c.patch_dim(), d}},
        {"patch_embed.bias", {d}},
        {"pos_embed", {c.pos_length(), d}},
        {"time_embed.fc1.weight", {c.freq_dim, d}},
        {"time_embed.fc1.bias", {d}},
        {"time_embed.fc2.weight", {d, d}},
        {"time_embed.fc2.bias", {d}},
    };
    if (c.num_classes > 0) {
        out.push_back({"class_embed", {c.num_classes + 1, d}});
    }
    for (int i = 0; i < c.L; ++i) {
        const std::string p = "blocks." + std::to_string(i);
        if (c.cond_mode == CondMode::token) {
            out.push_back({p + ".norm.gamma", {d}});
            out.push_back({p + ".norm.beta", {d}});
        } else {
            out.push_back({p + ".adaln.weight", {d, 2 * d}});
            out.push_back({p + ".adaln.bias", {2 * d}});
        }
        out.push_back({p + ".in_proj.weight", {d, 2 * inner}});
        out.push_back({p + ".conv.weight", {inner, c.conv_kernel}});
        out.push_back({p + ".conv.bias", {inner}});
        for (const char* dir : {".fwd", ".bwd"}) {
            out.push_back({p + dir + ".a_log", {inner, state}});
            out.push_back({p + dir + ".x_proj", {inner, rank + 2 * state}});
            out.push_back({p + dir + ".dt_proj", {rank, inner}});
            out.push_back({p + dir + ".dt_bias", {inner}});
            out.push_back({p + dir + ".d_skip", {inner}});
        }
        out.push_back({p + ".out_proj.weight", {inner, d}});
    }
    if (c.skip_mode == SkipMode::concat) {
        for (int j = 0; j < c.L / 2; ++j) {
            out.push_back({"skips." + std::to_string(j) + ".weight", {2 * d, d}});
            out.push_back({"skips." + std::to_string(j) + ".bias", {d}});
        }
    }
    out.push_back({"final_norm.gamma", {d}});
    out.push_back({"final_norm.beta", {d}});
    out.push_back({"decoder.weight", {d, Index(c.p) * c.p * c.out_channels()}});
    out.push_back({"decoder.bias", {Index(c.p) * c.p * c.out_channels()}});
    return out;
}

Index param_count(const ModelConfig& config)
{
    Index total = 0;
    for (const auto& spec : param_inventory(config)) {
        total += numel(spec.shape);
    }
    return total;
}

std::vector<std::pair<std::string, Index>> inventory_by_component(const ModelConfig& config)
{
    std::vector<std::pair<std::string, Index>> out;
    for (const auto& spec : param_inventory(config)) {
        const std::string component = spec.name.substr(0, spec.name.find('.'));
        if (out.empty() || out.back().first != component) {
            out.emplace_back(component, 0);
        }
        out.back().second += numel(spec.shape);
    }
    return out;
}

std::int64_t block_macs(const ModelConfig& c, Index seq)
{
    const std::int64_t d = c.D;
    const std::int64_t inner = c.inner();
    const std::int64_t state = c.N;
    const std::int64_t rank = c.rank();
    std::int64_t macs = seq * d * 2 * inner;
    macs += seq * inner * c.conv_kernel;
    macs += 2 * (seq * inner * (rank + 2 * state) + seq * rank * inner + seq * (5 * inner * state + inner));
    macs += seq * inner * d;
    if (c.cond_mode == CondMode::adaln) {
        macs += d * 2 * d;
    }
    return macs;
}

std::int64_t forward_macs(const ModelConfig& c, Index batch)
{
    c.validate();
    const std::int64_t d = c.D;
    const std::int64_t tokens = c.tokens();
    const std::int64_t seq = c.sequence_length();

    std::int64_t macs = tokens * c.patch_dim() * d;
    macs += std::int64_t(c.freq_dim) * d + d * d;
    macs += c.L * block_macs(c, seq);
    if (c.skip_mode == SkipMode::concat) {
        macs += std::int64_t(c.L / 2) * seq * 2 * d * d;
    }
    macs += tokens * d * std::int64_t(c.p) * c.p * c.out_channels();
    return macs * batch;
}

} // namespace dis
