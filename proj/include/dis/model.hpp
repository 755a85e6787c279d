#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dis/ssm.hpp"

namespace dis {

enum class CondMode { token, adaln };
enum class SkipMode { concat, add, none };

std::string to_string(CondMode mode);
std::string to_string(SkipMode mode);
CondMode parse_cond_mode(const std::string& text);
SkipMode parse_skip_mode(const std::string& text);

struct ModelConfig {
    int L = 3;
    int D = 64;
    int E = 2;
    int N = 16;
    int p = 2;
    int H = 8;
    int W = 8;
    int C = 1;
    int num_classes = 0;
    CondMode cond_mode = CondMode::token;
    SkipMode skip_mode = SkipMode::concat;
    bool learn_sigma = true;
    bool pos_embed_cond = true;
    int conv_kernel = 4;
    int dt_rank = 0; // 0 selects ceil(D / 16)
    int freq_dim = 256;
    int num_timesteps = 1000;

    Index inner() const { return Index(E) * D; }
    Index rank() const { return dt_rank > 0 ? dt_rank : (D + 15) / 16; }
    Index tokens() const { return Index(H / p) * (W / p); }
    Index patch_dim() const { return Index(p) * p * C; }
    Index out_channels() const { return learn_sigma ? 2 * C : C; }
    Index n_cond() const
    {
        if (cond_mode == CondMode::adaln) {
            return 0;
        }
        return num_classes > 0 ? 2 : 1;
    }
    Index sequence_length() const { return tokens() + n_cond(); }
    Index pos_length() const { return pos_embed_cond ? sequence_length() : tokens(); }
    int null_class() const { return num_classes; }

    /// Throws ConfigError naming the first violated constraint.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

/// Reference rows of the scaling table: 32x32x3, p = 4, unconditional.
struct ScaleRow {
    std::string name;
    ModelConfig config;
    double ref_params;
    double ref_gflops;
};
std::vector<ScaleRow> scale_rows();

struct ParamSpec {
    std::string name;
    Shape shape;
};

/// Every trainable tensor in construction order.
std::vector<ParamSpec> param_inventory(const ModelConfig& config);
Index param_count(const ModelConfig& config);

/// Top-level component name ("blocks", "skips", ...) with its parameter subtotal.
std::vector<std::pair<std::string, Index>> inventory_by_component(const ModelConfig& config);

/// Multiply-accumulates of one block over `seq` tokens (projections, conv and
/// both scan directions).
std::int64_t block_macs(const ModelConfig& config, Index seq);

/// Multiply-accumulates of one forward pass, matching the instrumented counter.
std::int64_t forward_macs(const ModelConfig& config, Index batch = 1);

// ---------------------------------------------------------------------------
// Layout

namespace detail {

inline std::shared_ptr<const std::vector<Index>> patch_index(Index batch, Index height, Index width, Index channels,
                                                             Index p, bool to_tokens)
{
    const Index rows = height / p;
    const Index cols = width / p;
    const Index per_patch = p * p * channels;
    auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(batch * height * width * channels));
    for (Index b = 0; b < batch; ++b) {
        for (Index r = 0; r < rows; ++r) {
            for (Index q = 0; q < cols; ++q) {
                for (Index py = 0; py < p; ++py) {
                    for (Index px = 0; px < p; ++px) {
                        for (Index c = 0; c < channels; ++c) {
                            const Index token = ((b * rows + r) * cols + q) * per_patch + (py * p + px) * channels + c;
                            const Index pixel = ((b * height + r * p + py) * width + q * p + px) * channels + c;
                            (*index)[static_cast<std::size_t>(to_tokens ? token : pixel)] = to_tokens ? pixel : token;
                        }
                    }
                }
            }
        }
    }
    return index;
}

} // namespace detail

/// [H, W, C] or [B, H, W, C] -> [(B,) J, p*p*C]; patches row-major, channels fastest.
template <typename Scalar>
Tensor<Scalar> patchify(const Tensor<Scalar>& img, Index p)
{
    if (img.rank() != 3 && img.rank() != 4) {
        throw ShapeError("patchify expects [H, W, C] or [B, H, W, C], got " + to_string(img.shape()));
    }
    const Index batch = img.rank() == 4 ? img.dim(0) : 1;
    const Index height = img.dim(-3);
    const Index width = img.dim(-2);
    const Index channels = img.dim(-1);
    if (p < 1 || height % p != 0 || width % p != 0) {
        throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not divisible by patch size " + std::to_string(p));
    }
    Shape out = {height * width / (p * p), p * p * channels};
    if (img.rank() == 4) {
        out.insert(out.begin(), batch);
    }
    return gather(img, detail::patch_index(batch, height, width, channels, p, true), out);
}

/// Exact inverse of patchify.
template <typename Scalar>
Tensor<Scalar> unpatchify(const Tensor<Scalar>& tokens, Index p, Index height, Index width)
{
    if (tokens.rank() != 2 && tokens.rank() != 3) {
        throw ShapeError("unpatchify expects [J, P] or [B, J, P], got " + to_string(tokens.shape()));
    }
    if (p < 1 || height % p != 0 || width % p != 0 || tokens.dim(-2) * p * p != height * width ||
        tokens.dim(-1) % (p * p) != 0) {
        throw ShapeError("unpatchify: tokens " + to_string(tokens.shape()) + " do not tile " + std::to_string(height) +
                         "x" + std::to_string(width) + " with p=" + std::to_string(p));
    }
    const Index batch = tokens.rank() == 3 ? tokens.dim(0) : 1;
    const Index channels = tokens.dim(-1) / (p * p);
    Shape out = {height, width, channels};
    if (tokens.rank() == 3) {
        out.insert(out.begin(), batch);
    }
    return gather(tokens, detail::patch_index(batch, height, width, channels, p, false), out);
}

// ---------------------------------------------------------------------------
// Conditioning

/// Sinusoidal features laid out [cos(t f_0..f_{h-1}) | sin(t f_0..f_{h-1})],
/// f_i = 10000^(-i/h), h = dim / 2.
template <typename Scalar>
std::vector<Scalar> sinusoid_features(int t, Index dim)
{
    const Index half = dim / 2;
    std::vector<Scalar> out(static_cast<std::size_t>(dim), Scalar(0));
    for (Index i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        out[static_cast<std::size_t>(i)] = static_cast<Scalar>(std::cos(t * freq));
        out[static_cast<std::size_t>(half + i)] = static_cast<Scalar>(std::sin(t * freq));
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> timestep_embedding(int t, Index dim, int num_timesteps = 1000)
{
    if (t < 0 || t >= num_timesteps) {
        throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_timesteps) + ")");
    }
    if (dim < 2 || dim % 2 != 0) {
        throw ContractError("timestep embedding dim must be even, got " + std::to_string(dim));
    }
    return Tensor<Scalar>({dim}, sinusoid_features<Scalar>(t, dim));
}

/// normalize(h) * scale + shift with (scale | shift) = emb @ weight + bias.
/// h [..., M, D], emb [..., D], weight [D, 2D], bias [2D].
template <typename Scalar>
Tensor<Scalar> adaln(const Tensor<Scalar>& h, const Tensor<Scalar>& emb, const Tensor<Scalar>& weight,
                     const Tensor<Scalar>& bias, Scalar eps = Scalar(1e-6))
{
    const Index hidden = h.dim(-1);
    if (emb.rank() + 1 != h.rank() || emb.dim(-1) != hidden || weight.shape() != Shape{hidden, 2 * hidden}) {
        throw ShapeError("adaln: h " + to_string(h.shape()) + ", emb " + to_string(emb.shape()) + ", weight " +
                         to_string(weight.shape()));
    }
    const Tensor<Scalar> mod = matmul(emb, weight) + bias;
    Shape lifted = emb.shape();
    lifted.insert(lifted.end() - 1, 1);
    const Tensor<Scalar> scale = reshape(slice(mod, -1, 0, hidden), lifted);
    const Tensor<Scalar> shift = reshape(slice(mod, -1, hidden, hidden), lifted);
    return normalize_last(h, eps) * scale + shift;
}

template <typename Scalar>
struct TokenSequence {
    Tensor<Scalar> tokens; // [B, n_cond + J, D]
    Index n_cond = 0;
};

/// [t_emb; c_emb; x_tokens] along the token axis plus learned positions.
/// x_tokens [B, J, D], t_emb and c_emb [B, D]. `pos` is [n_cond + J, D] when
/// it covers the condition tokens, otherwise [J, D] and added to patches only.
template <typename Scalar>
TokenSequence<Scalar> build_sequence(const Tensor<Scalar>& x_tokens, const Tensor<Scalar>& t_emb,
                                     const std::optional<Tensor<Scalar>>& c_emb, const Tensor<Scalar>& pos,
                                     bool pos_covers_cond = true)
{
    if (x_tokens.rank() != 3 || t_emb.shape() != Shape{x_tokens.dim(0), x_tokens.dim(2)} ||
        (c_emb && c_emb->shape() != t_emb.shape())) {
        throw ShapeError("build_sequence: tokens " + to_string(x_tokens.shape()) + ", t_emb " +
                         to_string(t_emb.shape()));
    }
    const Index batch = x_tokens.dim(0);
    const Index hidden = x_tokens.dim(2);
    TokenSequence<Scalar> seq;
    seq.n_cond = c_emb ? 2 : 1;
    std::vector<Tensor<Scalar>> parts = {reshape(t_emb, {batch, 1, hidden})};
    if (c_emb) {
        parts.push_back(reshape(*c_emb, {batch, 1, hidden}));
    }
    parts.push_back(pos_covers_cond ? x_tokens : x_tokens + pos);
    seq.tokens = concat(parts, 1);
    if (pos_covers_cond) {
        seq.tokens = seq.tokens + pos;
    }
    return seq;
}

/// concat: [shallow | deep] @ weight + bias; add: shallow + deep; none: deep.
template <typename Scalar>
Tensor<Scalar> skip_fuse(const Tensor<Scalar>& shallow, const Tensor<Scalar>& deep, SkipMode mode,
                         const Tensor<Scalar>& weight = {}, const Tensor<Scalar>& bias = {})
{
    if (shallow.shape() != deep.shape()) {
        throw ShapeError("skip_fuse: " + to_string(shallow.shape()) + " vs " + to_string(deep.shape()));
    }
    switch (mode) {
    case SkipMode::none:
        return deep;
    case SkipMode::add:
        return shallow + deep;
    case SkipMode::concat:
        break;
    }
    return matmul(concat<Scalar>({shallow, deep}, -1), weight) + bias;
}

// ---------------------------------------------------------------------------
// Network

template <typename Scalar>
struct ModelOutput {
    Tensor<Scalar> eps; // [B, H, W, C]
    Tensor<Scalar> v;   // [B, H, W, C]; undefined without learn_sigma
};

/// Anything that maps (x_t, t, class) to a noise prediction.
template <typename Scalar>
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    virtual const ModelConfig& config() const = 0;
    /// `classes` is empty for unconditional models; null_class() selects the
    /// guidance-free row.
    virtual ModelOutput<Scalar> predict(const Tensor<Scalar>& x_t, const std::vector<int>& timesteps,
                                        const std::vector<int>& classes) = 0;
};

struct ForwardTrace {
    int shallow = 0;
    int middle = 0;
    int deep = 0;
    int fusions = 0;
    Index block_tokens = 0;
    Index decode_tokens = 0;
    std::vector<int> classes_seen;
};

/// Deterministic initial values for one inventory entry.
template <typename Scalar>
std::vector<Scalar> initial_values(const ModelConfig& config, const ParamSpec& spec, Rng& rng)
{
    const auto n = static_cast<std::size_t>(numel(spec.shape));
    const auto ends_with = [&](const std::string& suffix) {
        return spec.name.size() >= suffix.size() &&
               spec.name.compare(spec.name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    const bool skip = spec.name.rfind("skips.", 0) == 0;
    std::vector<Scalar> v(n, Scalar(0));
    if (ends_with(".gamma") || ends_with(".d_skip")) {
        v.assign(n, Scalar(1));
    } else if (ends_with("adaln.bias")) {
        std::fill(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), Scalar(1));
    } else if (skip && ends_with(".weight")) {
        const Index hidden = spec.shape[1];
        for (Index d = 0; d < hidden; ++d) {
            v[static_cast<std::size_t>((hidden + d) * hidden + d)] = Scalar(1);
        }
    } else if (ends_with(".a_log")) {
        const Index state = spec.shape[1];
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = static_cast<Scalar>(std::log(double(Index(i) % state + 1)));
        }
    } else if (ends_with(".dt_bias")) {
        for (auto& x : v) {
            const double dt = std::exp(std::log(1e-3) + rng.uniform() * (std::log(1e-1) - std::log(1e-3)));
            x = static_cast<Scalar>(dt + std::log(-std::expm1(-dt)));
        }
    } else if (ends_with("conv.weight")) {
        const double bound = 1.0 / std::sqrt(double(config.conv_kernel));
        for (auto& x : v) {
            x = static_cast<Scalar>(bound * (2.0 * rng.uniform() - 1.0));
        }
    } else if (ends_with(".bias") || ends_with(".beta") || ends_with("adaln.weight")) {
        // zeros
    } else {
        for (auto& x : v) {
            x = static_cast<Scalar>(rng.truncated_normal(0.02));
        }
    }
    return v;
}

template <typename Scalar>
class DisModel final : public NoisePredictor<Scalar> {
public:
    DisModel(ModelConfig config, Rng& rng) : config_(std::move(config))
    {
        config_.validate();
        for (const auto& spec : param_inventory(config_)) {
            params_.add(spec.name, spec.shape, initial_values<Scalar>(config_, spec, rng));
        }
        bind();
    }

    const ModelConfig& config() const override { return config_; }
    ParameterSet<Scalar>& params() { return params_; }
    const ParameterSet<Scalar>& params() const { return params_; }

    ModelOutput<Scalar> predict(const Tensor<Scalar>& x_t, const std::vector<int>& timesteps,
                                const std::vector<int>& classes) override
    {
        return forward(x_t, timesteps, classes);
    }

    /// x [B, H, W, C] -> (eps, v), each [B, H, W, C].
    ModelOutput<Scalar> forward(const Tensor<Scalar>& x, const std::vector<int>& timesteps,
                                const std::vector<int>& classes, ForwardTrace* trace = nullptr) const
    {
        const auto& c = config_;
        if (x.rank() != 4 || x.dim(1) != c.H || x.dim(2) != c.W || x.dim(3) != c.C) {
            throw ShapeError("model input " + to_string(x.shape()) + " does not match [B, " + std::to_string(c.H) +
                             ", " + std::to_string(c.W) + ", " + std::to_string(c.C) + "]");
        }
        const Index batch = x.dim(0);
        const Index tokens = c.tokens();
        if (static_cast<Index>(timesteps.size()) != batch) {
            throw ContractError("expected " + std::to_string(batch) + " timesteps, got " +
                                std::to_string(timesteps.size()));
        }

        Tensor<Scalar> h = matmul(patchify(x, c.p), patch_w_) + patch_b_;
        const Tensor<Scalar> t_emb = time_embed(timesteps);
        std::optional<Tensor<Scalar>> c_emb;
        if (c.num_classes > 0) {
            std::vector<int> ids = classes.empty() ? std::vector<int>(batch, c.null_class()) : classes;
            if (static_cast<Index>(ids.size()) != batch) {
                throw ContractError("expected " + std::to_string(batch) + " class ids, got " +
                                    std::to_string(ids.size()));
            }
            c_emb = gather_rows<Scalar>(class_table_, ids);
            if (trace) {
                trace->classes_seen.insert(trace->classes_seen.end(), ids.begin(), ids.end());
            }
        } else if (!classes.empty()) {
            throw ContractError("class ids passed to an unconditional model");
        }

        Tensor<Scalar> emb;
        if (c.cond_mode == CondMode::token) {
            h = build_sequence(h, t_emb, c_emb, pos_, c.pos_embed_cond).tokens;
        } else {
            h = h + pos_;
            emb = c_emb ? t_emb + *c_emb : t_emb;
        }

        const int half = c.L / 2;
        std::vector<Tensor<Scalar>> skips;
        for (int i = 0; i < c.L; ++i) {
            if (i > half) {
                const int j = i - half - 1;
                const auto& fuse = fusions_[static_cast<std::size_t>(j)];
                h = skip_fuse(skips.back(), h, c.skip_mode, fuse.first, fuse.second);
                skips.pop_back();
                if (trace && c.skip_mode != SkipMode::none) {
                    ++trace->fusions;
                }
            }
            h = block(blocks_[static_cast<std::size_t>(i)], h, emb);
            if (i < half) {
                skips.push_back(h);
            }
            if (trace) {
                ++(i < half ? trace->shallow : i == half ? trace->middle : trace->deep);
            }
        }
        if (trace) {
            trace->block_tokens = h.dim(1);
        }
        if (c.n_cond() > 0) {
            h = slice(h, 1, c.n_cond(), tokens);
        }
        if (trace) {
            trace->decode_tokens = h.dim(1);
        }
        h = layer_norm(h, final_gamma_, final_beta_);
        const Tensor<Scalar> image = unpatchify(matmul(h, decoder_w_) + decoder_b_, c.p, c.H, c.W);
        if (!c.learn_sigma) {
            return {image, {}};
        }
        return {slice(image, -1, 0, c.C), slice(image, -1, c.C, c.C)};
    }

private:
    struct Block {
        Tensor<Scalar> norm_gamma, norm_beta, adaln_w, adaln_b;
        Tensor<Scalar> in_proj, conv_w, conv_b, out_proj;
        SsmDirectionParams<Scalar> fwd, bwd;
    };

    SsmDirectionParams<Scalar> direction(const std::string& prefix) const
    {
        return {params_.get(prefix + ".a_log"), params_.get(prefix + ".x_proj"), params_.get(prefix + ".dt_proj"),
                params_.get(prefix + ".dt_bias"), params_.get(prefix + ".d_skip")};
    }

    void bind()
    {
        const auto& c = config_;
        patch_w_ = params_.get("patch_embed.weight");
        patch_b_ = params_.get("patch_embed.bias");
        pos_ = params_.get("pos_embed");
        fc1_w_ = params_.get("time_embed.fc1.weight");
        fc1_b_ = params_.get("time_embed.fc1.bias");
        fc2_w_ = params_.get("time_embed.fc2.weight");
        fc2_b_ = params_.get("time_embed.fc2.bias");
        if (c.num_classes > 0) {
            class_table_ = params_.get("class_embed");
        }
        for (int i = 0; i < c.L; ++i) {
            const std::string p = "blocks." + std::to_string(i);
            Block b;
            if (c.cond_mode == CondMode::token) {
                b.norm_gamma = params_.get(p + ".norm.gamma");
                b.norm_beta = params_.get(p + ".norm.beta");
            } else {
                b.adaln_w = params_.get(p + ".adaln.weight");
                b.adaln_b = params_.get(p + ".adaln.bias");
            }
            b.in_proj = params_.get(p + ".in_proj.weight");
            b.conv_w = params_.get(p + ".conv.weight");
            b.conv_b = params_.get(p + ".conv.bias");
            b.fwd = direction(p + ".fwd");
            b.bwd = direction(p + ".bwd");
            b.out_proj = params_.get(p + ".out_proj.weight");
            blocks_.push_back(std::move(b));
        }
        for (int j = 0; j < c.L / 2; ++j) {
            const std::string p = "skips." + std::to_string(j);
            if (c.skip_mode == SkipMode::concat) {
                fusions_.emplace_back(params_.get(p + ".weight"), params_.get(p + ".bias"));
            } else {
                fusions_.emplace_back();
            }
        }
        final_gamma_ = params_.get("final_norm.gamma");
        final_beta_ = params_.get("final_norm.beta");
        decoder_w_ = params_.get("decoder.weight");
        decoder_b_ = params_.get("decoder.bias");
    }

    Tensor<Scalar> time_embed(const std::vector<int>& timesteps) const
    {
        const Index dim = config_.freq_dim;
        std::vector<Scalar> table;
        table.reserve(timesteps.size() * static_cast<std::size_t>(dim));
        for (int t : timesteps) {
            const auto row = timestep_embedding<Scalar>(t, dim, config_.num_timesteps);
            table.insert(table.end(), row.values().begin(), row.values().end());
        }
        const Tensor<Scalar> features({static_cast<Index>(timesteps.size()), dim}, std::move(table));
        return matmul(silu(matmul(features, fc1_w_) + fc1_b_), fc2_w_) + fc2_b_;
    }

    Tensor<Scalar> block(const Block& b, const Tensor<Scalar>& h, const Tensor<Scalar>& emb) const
    {
        const Index inner = config_.inner();
        const Tensor<Scalar> normed = config_.cond_mode == CondMode::token
                                          ? layer_norm(h, b.norm_gamma, b.norm_beta)
                                          : adaln(h, emb, b.adaln_w, b.adaln_b);
        const Tensor<Scalar> xz = matmul(normed, b.in_proj);
        const Tensor<Scalar> u = silu(depthwise_causal_conv1d(slice(xz, -1, 0, inner), b.conv_w, b.conv_b));
        const Tensor<Scalar> y = bidirectional_ssm(u, b.fwd, b.bwd);
        return h + matmul(silu(slice(xz, -1, inner, inner)) * y, b.out_proj);
    }

    ModelConfig config_;
    ParameterSet<Scalar> params_;
    Tensor<Scalar> patch_w_, patch_b_, pos_, fc1_w_, fc1_b_, fc2_w_, fc2_b_, class_table_;
    std::vector<Block> blocks_;
    std::vector<std::pair<Tensor<Scalar>, Tensor<Scalar>>> fusions_;
    Tensor<Scalar> final_gamma_, final_beta_, decoder_w_, decoder_b_;
};

} // namespace dis
