#include "dis/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dis {

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) {
            u8(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) {
            u8(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void str(const std::string& s)
    {
        u64(s.size());
        out_ += s;
    }
    void raw(const char* data, std::size_t n) { out_.append(data, n); }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    void need(std::uint64_t n) const
    {
        if (n > bytes_.size() - pos_) {
            throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
        }
    }
    std::uint8_t u8()
    {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::uint64_t u64()
    {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= std::uint64_t(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        }
        return v;
    }
    std::uint32_t u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= std::uint32_t(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        }
        return v;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    double f64() { return std::bit_cast<double>(u64()); }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str()
    {
        const std::uint64_t n = u64();
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

void write_table(Writer& w, const std::vector<TensorRecord>& table)
{
    w.u64(table.size());
    for (const auto& rec : table) {
        w.str(rec.name);
        w.u32(static_cast<std::uint32_t>(rec.shape.size()));
        for (Index d : rec.shape) {
            w.i64(d);
        }
        for (float v : rec.data) {
            w.f32(v);
        }
    }
}

std::vector<TensorRecord> read_table(Reader& r)
{
    const std::uint64_t count = r.u64();
    std::vector<TensorRecord> table;
    for (std::uint64_t i = 0; i < count; ++i) {
        TensorRecord rec;
        rec.name = r.str();
        const std::uint32_t rank = r.u32();
        if (rank > 8) {
            throw FormatError("checkpoint tensor '" + rec.name + "' has rank " + std::to_string(rank));
        }
        std::uint64_t n = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const Index d = r.i64();
            if (d < 0 || d > (Index(1) << 32)) {
                throw FormatError("checkpoint tensor '" + rec.name + "' has a bad extent");
            }
            rec.shape.push_back(d);
            n *= static_cast<std::uint64_t>(d);
            if (n > (std::uint64_t(1) << 40)) {
                throw FormatError("checkpoint tensor '" + rec.name + "' is implausibly large");
            }
        }
        r.need(n * 4);
        rec.data.resize(n);
        for (auto& v : rec.data) {
            v = r.f32();
        }
        table.push_back(std::move(rec));
    }
    return table;
}

std::vector<TensorRecord> records(const ParameterSet<float>& params,
                                  const std::map<std::string, std::vector<float>>* values = nullptr)
{
    std::vector<TensorRecord> table;
    for (const auto& [name, tensor] : params) {
        TensorRecord rec{name, tensor.shape(), {}};
        if (values) {
            rec.data = values->at(name);
        } else {
            rec.data.assign(tensor.values().begin(), tensor.values().end());
        }
        table.push_back(std::move(rec));
    }
    return table;
}

void check_table(const std::vector<TensorRecord>& table, const ParameterSet<float>& params, const char* what)
{
    if (table.size() != params.size()) {
        throw FormatError(std::string("checkpoint ") + what + " table has " + std::to_string(table.size()) +
                          " entries, model has " + std::to_string(params.size()));
    }
    for (const auto& rec : table) {
        if (!params.contains(rec.name)) {
            throw FormatError(std::string("checkpoint ") + what + " entry '" + rec.name + "' unknown to the model");
        }
        if (params.get(rec.name).shape() != rec.shape) {
            throw FormatError(std::string("checkpoint ") + what + " entry '" + rec.name + "' has shape " +
                              to_string(rec.shape) + ", model expects " + to_string(params.get(rec.name).shape()));
        }
    }
}

void copy_into(const std::vector<TensorRecord>& table, std::map<std::string, std::vector<float>>& dest)
{
    for (const auto& rec : table) {
        dest.at(rec.name) = rec.data;
    }
}

void copy_into(const std::vector<TensorRecord>& table, ParameterSet<float>& params)
{
    for (const auto& rec : table) {
        auto w = params.get(rec.name).mutable_values();
        std::copy(rec.data.begin(), rec.data.end(), w.begin());
    }
}

} // namespace

std::string encode_checkpoint(const Checkpoint& ckpt)
{
    Writer w;
    w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
    w.u8(kCheckpointVersion);
    w.str(ckpt.config_text);
    w.i64(ckpt.step);
    w.str(ckpt.rng_state);
    w.i64(ckpt.adam_steps);
    w.f64(ckpt.adam.beta1);
    w.f64(ckpt.adam.beta2);
    w.f64(ckpt.adam.eps);
    w.f64(ckpt.adam.weight_decay);
    w.f64(ckpt.ema_decay);
    write_table(w, ckpt.params);
    write_table(w, ckpt.adam_m);
    write_table(w, ckpt.adam_v);
    write_table(w, ckpt.ema);
    return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes)
{
    if (bytes.size() < sizeof kCheckpointMagic + 1 ||
        std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
        throw FormatError("not a checkpoint file (bad magic)");
    }
    Reader r(bytes);
    for (std::size_t i = 0; i < sizeof kCheckpointMagic; ++i) {
        r.u8();
    }
    const std::uint8_t version = r.u8();
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ckpt;
    ckpt.config_text = r.str();
    ckpt.step = r.i64();
    ckpt.rng_state = r.str();
    ckpt.adam_steps = r.i64();
    ckpt.adam.beta1 = r.f64();
    ckpt.adam.beta2 = r.f64();
    ckpt.adam.eps = r.f64();
    ckpt.adam.weight_decay = r.f64();
    ckpt.ema_decay = r.f64();
    ckpt.params = read_table(r);
    ckpt.adam_m = read_table(r);
    ckpt.adam_v = read_table(r);
    ckpt.ema = read_table(r);
    if (!r.done()) {
        throw FormatError("checkpoint has trailing bytes");
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    const std::string bytes = encode_checkpoint(ckpt);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw ConfigError("cannot write checkpoint " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read checkpoint " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return decode_checkpoint(buf.str());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

RunConfig checkpoint_config(const Checkpoint& ckpt)
{
    try {
        return parse_run_config(ckpt.config_text);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config record unreadable: ") + e.what());
    }
}

Checkpoint capture_checkpoint(const RunConfig& config, std::int64_t step, const std::string& rng_state,
                              const ParameterSet<float>& params, const AdamW<float>& adam, const Ema<float>& ema)
{
    Checkpoint ckpt;
    ckpt.config_text = emit_run_config(config);
    ckpt.step = step;
    ckpt.rng_state = rng_state;
    ckpt.adam_steps = adam.steps();
    ckpt.adam = adam.config();
    ckpt.ema_decay = ema.decay();
    ckpt.params = records(params);
    ckpt.adam_m = records(params, &adam.first_moments());
    ckpt.adam_v = records(params, &adam.second_moments());
    ckpt.ema = records(params, &ema.shadow());
    return ckpt;
}

void restore_checkpoint(const Checkpoint& ckpt, const RunConfig& config, ParameterSet<float>& params,
                        AdamW<float>& adam, Ema<float>& ema)
{
    const RunConfig stored = checkpoint_config(ckpt);
    if (!(stored.model == config.model)) {
        throw ConfigError("checkpoint was written for a different model config:\n" + emit_run_config(stored));
    }
    check_table(ckpt.params, params, "parameter");
    check_table(ckpt.adam_m, params, "first-moment");
    check_table(ckpt.adam_v, params, "second-moment");
    check_table(ckpt.ema, params, "EMA");
    copy_into(ckpt.params, params);
    copy_into(ckpt.adam_m, adam.first_moments());
    copy_into(ckpt.adam_v, adam.second_moments());
    copy_into(ckpt.ema, ema.shadow());
    adam.set_steps(ckpt.adam_steps);
}

LoadedModel load_model(const Checkpoint& ckpt, bool use_ema)
{
    RunConfig config = checkpoint_config(ckpt);
    Rng rng(config.train.seed, 0);
    LoadedModel loaded{config, DisModel<float>(config.model, rng)};
    const auto& table = use_ema ? ckpt.ema : ckpt.params;
    check_table(table, loaded.model.params(), use_ema ? "EMA" : "parameter");
    copy_into(table, loaded.model.params());
    return loaded;
}

} // namespace dis
