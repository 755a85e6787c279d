#include "dis/run_config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace dis {

namespace {

std::string trim(const std::string& s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return "";
    }
    return s.substr(first, s.find_last_not_of(" \t\r") - first + 1);
}

std::string format_double(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

long long parse_integer(const std::string& text)
{
    errno = 0;
    char* end = nullptr;
    const long long v = std::strtoll(text.c_str(), &end, 10);
    if (text.empty() || *end != '\0' || errno == ERANGE) {
        throw ConfigError("expected an integer, got '" + text + "'");
    }
    return v;
}

double parse_real(const std::string& text)
{
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || *end != '\0' || errno == ERANGE) {
        throw ConfigError("expected a number, got '" + text + "'");
    }
    return v;
}

bool parse_bool(const std::string& text)
{
    if (text == "true" || text == "1") {
        return true;
    }
    if (text == "false" || text == "0") {
        return false;
    }
    throw ConfigError("expected true or false, got '" + text + "'");
}

struct Field {
    std::function<std::string(const RunConfig&)> emit;
    std::function<void(RunConfig&, const std::string&)> parse;
};

template <typename T>
Field int_field(T RunConfig::*group, int T::*member)
{
    return {[=](const RunConfig& c) { return std::to_string(c.*group.*member); },
            [=](RunConfig& c, const std::string& v) {
                const long long x = parse_integer(v);
                if (x < INT32_MIN || x > INT32_MAX) {
                    throw ConfigError("integer out of range: " + v);
                }
                c.*group.*member = static_cast<int>(x);
            }};
}

template <typename T>
Field real_field(T RunConfig::*group, double T::*member)
{
    return {[=](const RunConfig& c) { return format_double(c.*group.*member); },
            [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_real(v); }};
}

template <typename T>
Field bool_field(T RunConfig::*group, bool T::*member)
{
    return {[=](const RunConfig& c) { return std::string(c.*group.*member ? "true" : "false"); },
            [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_bool(v); }};
}

const std::vector<std::pair<std::string, Field>>& fields()
{
    using M = ModelConfig;
    using Df = DiffusionConfig;
    using Tr = TrainConfig;
    using Sa = SamplerConfig;
    static const std::vector<std::pair<std::string, Field>> table = {
        {"L", int_field(&RunConfig::model, &M::L)},
        {"D", int_field(&RunConfig::model, &M::D)},
        {"E", int_field(&RunConfig::model, &M::E)},
        {"N", int_field(&RunConfig::model, &M::N)},
        {"p", int_field(&RunConfig::model, &M::p)},
        {"H", int_field(&RunConfig::model, &M::H)},
        {"W", int_field(&RunConfig::model, &M::W)},
        {"C", int_field(&RunConfig::model, &M::C)},
        {"num_classes", int_field(&RunConfig::model, &M::num_classes)},
        {"cond_mode",
         {[](const RunConfig& c) { return to_string(c.model.cond_mode); },
          [](RunConfig& c, const std::string& v) { c.model.cond_mode = parse_cond_mode(v); }}},
        {"skip_mode",
         {[](const RunConfig& c) { return to_string(c.model.skip_mode); },
          [](RunConfig& c, const std::string& v) { c.model.skip_mode = parse_skip_mode(v); }}},
        {"learn_sigma", bool_field(&RunConfig::model, &M::learn_sigma)},
        {"pos_embed_cond", bool_field(&RunConfig::model, &M::pos_embed_cond)},
        {"conv_kernel", int_field(&RunConfig::model, &M::conv_kernel)},
        {"dt_rank", int_field(&RunConfig::model, &M::dt_rank)},
        {"freq_dim", int_field(&RunConfig::model, &M::freq_dim)},
        {"T", int_field(&RunConfig::diffusion, &Df::T)},
        {"beta_1", real_field(&RunConfig::diffusion, &Df::beta_1)},
        {"beta_T", real_field(&RunConfig::diffusion, &Df::beta_T)},
        {"vlb_weight", real_field(&RunConfig::diffusion, &Df::vlb_weight)},
        {"seed",
         {[](const RunConfig& c) { return std::to_string(c.train.seed); },
          [](RunConfig& c, const std::string& v) {
              const long long x = parse_integer(v);
              if (x < 0) {
                  throw ConfigError("seed must be non-negative");
              }
              c.train.seed = static_cast<std::uint64_t>(x);
          }}},
        {"steps", int_field(&RunConfig::train, &Tr::steps)},
        {"batch", int_field(&RunConfig::train, &Tr::batch)},
        {"lr", real_field(&RunConfig::train, &Tr::lr)},
        {"beta1",
         {[](const RunConfig& c) { return format_double(c.train.adam.beta1); },
          [](RunConfig& c, const std::string& v) { c.train.adam.beta1 = parse_real(v); }}},
        {"beta2",
         {[](const RunConfig& c) { return format_double(c.train.adam.beta2); },
          [](RunConfig& c, const std::string& v) { c.train.adam.beta2 = parse_real(v); }}},
        {"adam_eps",
         {[](const RunConfig& c) { return format_double(c.train.adam.eps); },
          [](RunConfig& c, const std::string& v) { c.train.adam.eps = parse_real(v); }}},
        {"weight_decay",
         {[](const RunConfig& c) { return format_double(c.train.adam.weight_decay); },
          [](RunConfig& c, const std::string& v) { c.train.adam.weight_decay = parse_real(v); }}},
        {"ema_decay", real_field(&RunConfig::train, &Tr::ema_decay)},
        {"cond_dropout", real_field(&RunConfig::train, &Tr::cond_dropout)},
        {"grad_clip", real_field(&RunConfig::train, &Tr::grad_clip)},
        {"checkpoint_every", int_field(&RunConfig::train, &Tr::checkpoint_every)},
        {"dataset",
         {[](const RunConfig& c) { return c.train.dataset; },
          [](RunConfig& c, const std::string& v) { c.train.dataset = v; }}},
        {"dataset_size", int_field(&RunConfig::train, &Tr::dataset_size)},
        {"hflip", bool_field(&RunConfig::train, &Tr::hflip)},
        {"log_wall_time", bool_field(&RunConfig::train, &Tr::log_wall_time)},
        {"sample_steps", int_field(&RunConfig::sampler, &Sa::num_steps)},
        {"cfg_scale", real_field(&RunConfig::sampler, &Sa::guidance_scale)},
        {"clip_range", real_field(&RunConfig::sampler, &Sa::clip_range)},
        {"sample_batch", int_field(&RunConfig::sampler, &Sa::batch_size)},
    };
    return table;
}

} // namespace

void RunConfig::validate() const
{
    model.validate();
    const auto fail = [](const std::string& what) { throw ConfigError("run config: " + what); };
    if (diffusion.T != model.num_timesteps) {
        fail("T and the model timestep range disagree");
    }
    if (!(diffusion.beta_1 > 0 && diffusion.beta_1 < diffusion.beta_T && diffusion.beta_T < 1)) {
        fail("need 0 < beta_1 < beta_T < 1");
    }
    if (diffusion.vlb_weight < 0) {
        fail("vlb_weight must be >= 0");
    }
    if (train.steps < 1 || train.batch < 1 || train.dataset_size < 1) {
        fail("steps, batch and dataset_size must be positive");
    }
    if (!(train.lr > 0)) {
        fail("lr must be positive");
    }
    if (!(train.ema_decay >= 0 && train.ema_decay <= 1) || !(train.cond_dropout >= 0 && train.cond_dropout <= 1)) {
        fail("ema_decay and cond_dropout must lie in [0, 1]");
    }
    if (train.grad_clip < 0 || train.checkpoint_every < 0) {
        fail("grad_clip and checkpoint_every must be >= 0");
    }
    if (sampler.num_steps < 1 || sampler.num_steps > diffusion.T) {
        fail("sample_steps must lie in [1, T]");
    }
    if (sampler.guidance_scale < 1 || sampler.batch_size < 1) {
        fail("cfg_scale must be >= 1 and sample_batch positive");
    }
}

RunConfig toy_run_config()
{
    RunConfig c;
    c.model.L = 3;
    c.model.D = 64;
    c.model.N = 16;
    c.model.p = 2;
    c.model.H = 8;
    c.model.W = 8;
    c.model.C = 1;
    c.model.num_classes = 2;
    c.train.lr = 1e-3;
    c.train.ema_decay = 0.995;
    c.train.steps = 2000;
    c.train.batch = 64;
    c.validate();
    return c;
}

RunConfig parse_run_config(const std::string& text)
{
    std::map<std::string, const Field*> lookup;
    for (const auto& [key, field] : fields()) {
        lookup.emplace(key, &field);
    }
    RunConfig config;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const std::string body = trim(line.substr(0, line.find('#')));
        if (body.empty()) {
            continue;
        }
        const auto eq = body.find('=');
        const std::string where = "line " + std::to_string(number) + ": ";
        if (eq == std::string::npos) {
            throw ConfigError(where + "expected 'key = value'");
        }
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        auto it = lookup.find(key);
        if (it == lookup.end()) {
            throw ConfigError(where + "unknown key '" + key + "'");
        }
        if (!seen.insert(key).second) {
            throw ConfigError(where + "repeated key '" + key + "'");
        }
        try {
            it->second->parse(config, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + key + ": " + e.what());
        }
    }
    config.model.num_timesteps = config.diffusion.T;
    config.validate();
    return config;
}

RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

std::string emit_run_config(const RunConfig& config)
{
    std::string out;
    for (const auto& [key, field] : fields()) {
        out += key + " = " + field.emit(config) + "\n";
    }
    return out;
}

} // namespace dis
