#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "dis/checkpoint.hpp"
#include "dis/dataset.hpp"
#include "dis/optim.hpp"
#include "dis/pnm.hpp"
#include "dis/run_config.hpp"
#include "dis/trainer.hpp"

using namespace dis;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

fs::path scratch(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / ("dis_test_trainer_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

struct Scalar1 {
    ParameterSet<double> params;
    Scalar1(double w0) { params.add("w", {1}, {w0}); }
    double w() const { return params.get("w").item(); }
    std::map<std::string, Tensor<double>> grad(double g) const { return {{"w", Tensor<double>({1}, {g})}}; }
};

RunConfig small_run(int steps)
{
    RunConfig c = toy_run_config();
    c.model.D = 16;
    c.model.N = 4;
    c.train.steps = steps;
    c.train.batch = 8;
    c.train.dataset_size = 64;
    c.train.checkpoint_every = 0;
    c.validate();
    return c;
}

double phi(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// E over the uniform jitter of exp(-(y - centre)^2 / (2 sigma^2)).
double blob_axis_mean(double y, double c)
{
    const double s = kBlobSigma;
    return s * std::sqrt(2 * std::numbers::pi) * (phi((y - c + kBlobJitter) / s) - phi((y - c - kBlobJitter) / s)) /
           (2 * kBlobJitter);
}

} // namespace

TEST_CASE("adamw on a quadratic bowl tracks a scalar oracle")
{
    Scalar1 s(1.0);
    AdamW<double> adam(s.params, {});
    double w = 1.0, m = 0, v = 0;
    for (int k = 1; k <= 100; ++k) {
        adam.step(s.params, s.grad(2 * s.w()), 0.1);
        const double g = 2 * w;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1 - std::pow(0.9, k));
        const double vh = v / (1 - std::pow(0.999, k));
        w -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        REQUIRE(std::abs(s.w() - w) < 1e-12);
    }
    CHECK(std::abs(s.w()) < 0.05);
    CHECK(adam.steps() == 100);
}

TEST_CASE("adamw leaves parameters with zero gradient alone")
{
    Scalar1 s(0.75);
    AdamW<double> adam(s.params, {});
    for (int k = 0; k < 10; ++k) {
        adam.step(s.params, s.grad(0.0), 1e-2);
        CHECK(s.w() == 0.75);
    }
}

TEST_CASE("adamw first step moves by lr against the gradient sign")
{
    for (double g : {3.0, -0.02, 1e3}) {
        Scalar1 s(0.5);
        AdamW<double> adam(s.params, {});
        adam.step(s.params, s.grad(g), 1e-3);
        CHECK(s.w() - 0.5 == doctest::Approx(-1e-3 * (g > 0 ? 1 : -1)).epsilon(1e-6));
    }
}

TEST_CASE("adamw rejects a non-finite gradient by name")
{
    Scalar1 s(0.5);
    AdamW<double> adam(s.params, {});
    try {
        adam.step(s.params, s.grad(std::nan("")), 1e-3);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("'w'") != std::string::npos);
    }
    CHECK(s.w() == 0.5);
    CHECK(adam.steps() == 0);
}

TEST_CASE("cosine learning rate")
{
    CHECK(cosine_lr(0, 1000) == 1e-4);
    CHECK(cosine_lr(500, 1000) == doctest::Approx(5e-5).epsilon(1e-12));
    CHECK(std::abs(cosine_lr(1000, 1000)) < 1e-20);
    CHECK(cosine_lr(250, 1000, 2.0) == doctest::Approx(1 + std::sqrt(0.5)).epsilon(1e-12));
    for (int s = 1; s <= 1000; ++s) {
        CHECK(cosine_lr(s, 1000) < cosine_lr(s - 1, 1000));
    }
    CHECK_THROWS_AS(cosine_lr(-1, 10), ContractError);
    CHECK_THROWS_AS(cosine_lr(11, 10), ContractError);
}

TEST_CASE("ema closed forms")
{
    std::vector<double> shadow{2.0, -1.0};
    const std::vector<double> same{2.0, -1.0};
    ema_update<double>(shadow, same, 0.9999);
    CHECK(shadow == same);

    std::vector<double> z{0.0};
    const std::vector<double> c{3.0};
    for (int k = 0; k < 100; ++k) {
        ema_update<double>(z, c, 0.9);
    }
    CHECK(std::abs(z[0] - 3.0 * (1 - std::pow(0.9, 100))) < 1e-12);

    std::vector<double> x{5.0};
    const std::vector<double> y{-7.0};
    ema_update<double>(x, y, 0.0);
    CHECK(x[0] == -7.0);

    std::vector<double> bad{1.0};
    CHECK_THROWS_AS(ema_update<double>(bad, same, 0.5), ShapeError);
}

TEST_CASE("ema shadow is the geometric average of the trajectory")
{
    Scalar1 s(1.0);
    AdamW<double> adam(s.params, {});
    const double decay = 0.8;
    Ema<double> ema(s.params, decay);
    std::vector<double> traj{1.0};
    for (int k = 0; k < 30; ++k) {
        adam.step(s.params, s.grad(2 * s.w() - 0.3), 0.05);
        ema.update(s.params);
        traj.push_back(s.w());
    }
    const std::size_t K = traj.size() - 1;
    double expected = std::pow(decay, double(K)) * traj[0];
    for (std::size_t i = 1; i <= K; ++i) {
        expected += (1 - decay) * std::pow(decay, double(K - i)) * traj[i];
    }
    CHECK(std::abs(ema.shadow().at("w")[0] - expected) < 1e-12);
}

TEST_CASE("two-gaussians dataset")
{
    const Dataset a = make_two_gaussians(64, 7);
    const Dataset b = make_two_gaussians(64, 7);
    const Dataset c = make_two_gaussians(64, 8);
    CHECK(a.images == b.images);
    CHECK(a.images != c.images);
    CHECK(a.H == 8);
    CHECK(a.W == 8);
    CHECK(a.C == 1);
    for (std::size_t k = 0; k < a.size(); ++k) {
        CHECK(a.labels[k] == int(k % 2));
        for (float v : a.images[k]) {
            REQUIRE(v >= -1.0f);
            REQUIRE(v <= 1.0f);
        }
        const QuadrantEnergy e = quadrant_energy(a.images[k], 8, 8, 1);
        if (a.labels[k] == 0) {
            CHECK(e.top_left > e.bottom_right);
        } else {
            CHECK(e.bottom_right > e.top_left);
        }
    }
}

TEST_CASE("two-gaussians pixel means match the analytic expectation")
{
    const std::size_t n = 40000;
    const Dataset d = make_two_gaussians(n, 3);
    for (int cls = 0; cls < 2; ++cls) {
        std::vector<double> sum(64, 0.0), sq(64, 0.0);
        double count = 0;
        for (std::size_t k = std::size_t(cls); k < n; k += 2) {
            for (std::size_t i = 0; i < 64; ++i) {
                sum[i] += d.images[k][i];
                sq[i] += double(d.images[k][i]) * d.images[k][i];
            }
            count += 1;
        }
        const double centre = kBlobCentre[cls];
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                const auto i = static_cast<std::size_t>(y * 8 + x);
                const double mean = sum[i] / count;
                const double var = sq[i] / count - mean * mean;
                const double se = std::sqrt(std::max(var, 1e-12) / count);
                const double expected = 2 * blob_axis_mean(y, centre) * blob_axis_mean(x, centre) - 1;
                CHECK(std::abs(mean - expected) < 5 * se + 1e-6);
            }
        }
    }
}

TEST_CASE("batch sampler epochs are seeded permutations")
{
    const Dataset d = make_two_gaussians(10, 0);
    BatchSampler a(d, 5, false), b(d, 5, false), c(d, 6, false);
    std::vector<std::size_t> ia, ib, ic;
    for (int k = 0; k < 5; ++k) {
        const Batch x = a.next(4), y = b.next(4), z = c.next(4);
        CHECK(x.pixels == y.pixels);
        ia.insert(ia.end(), x.indices.begin(), x.indices.end());
        ib.insert(ib.end(), y.indices.begin(), y.indices.end());
        ic.insert(ic.end(), z.indices.begin(), z.indices.end());
    }
    CHECK(ia == ib);
    CHECK(ia != ic);
    for (int epoch = 0; epoch < 2; ++epoch) {
        std::set<std::size_t> seen(ia.begin() + epoch * 10, ia.begin() + epoch * 10 + 10);
        CHECK(seen.size() == 10);
    }
}

TEST_CASE("batch sampler flips mirror columns")
{
    const Dataset d = make_two_gaussians(2, 0);
    BatchSampler s(d, 1, true);
    int flipped = 0;
    for (int k = 0; k < 40; ++k) {
        const Batch b = s.next(1);
        const auto& img = d.images[b.indices[0]];
        bool same = b.pixels == img;
        bool mirror = true;
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                mirror = mirror && b.pixels[std::size_t(y * 8 + x)] == img[std::size_t(y * 8 + 7 - x)];
            }
        }
        CHECK((same || mirror));
        flipped += same ? 0 : 1;
    }
    CHECK(flipped > 5);
    CHECK(flipped < 35);
}

TEST_CASE("sampler state round trip")
{
    const Dataset d = make_two_gaussians(10, 0);
    BatchSampler a(d, 9, true);
    a.next(7);
    BatchSampler b(d, 0, true);
    b.deserialize(a.serialize());
    for (int k = 0; k < 4; ++k) {
        CHECK(a.next(3).pixels == b.next(3).pixels);
    }
    const Dataset other = make_two_gaussians(12, 0);
    BatchSampler c(other, 0, false);
    CHECK_THROWS_AS(c.deserialize(a.serialize()), FormatError);
}

TEST_CASE("pnm round trip and errors")
{
    const fs::path dir = scratch("pnm");
    PnmImage img{3, 2, 3, {}};
    for (int i = 0; i < 18; ++i) {
        img.pixels.push_back(static_cast<std::uint8_t>(i * 14));
    }
    write_pnm(dir / "a.ppm", img);
    const PnmImage back = read_pnm(dir / "a.ppm");
    CHECK(back.width == 3);
    CHECK(back.height == 2);
    CHECK(back.channels == 3);
    CHECK(back.pixels == img.pixels);

    std::ofstream(dir / "comment.pgm", std::ios::binary) << "P5\n# note\n2 1\n255\n" << char(0) << char(255);
    const PnmImage g = read_pnm(dir / "comment.pgm");
    CHECK(g.pixels == std::vector<std::uint8_t>{0, 255});

    std::ofstream(dir / "short.pgm", std::ios::binary) << "P5\n2 2\n255\n" << char(1);
    CHECK_THROWS_AS(read_pnm(dir / "short.pgm"), FormatError);
    std::ofstream(dir / "ascii.pgm", std::ios::binary) << "P2\n1 1\n255\n0\n";
    CHECK_THROWS_AS(read_pnm(dir / "ascii.pgm"), FormatError);
    std::ofstream(dir / "deep.pgm", std::ios::binary) << "P5\n1 1\n65535\n" << char(0) << char(0);
    CHECK_THROWS_AS(read_pnm(dir / "deep.pgm"), FormatError);

    CHECK(to_byte(-1.0) == 0);
    CHECK(to_byte(1.0) == 255);
    CHECK(to_byte(7.0) == 255);
    CHECK(from_byte(0) == -1.0);
    CHECK(from_byte(255) == 1.0);
    for (int b = 0; b < 256; ++b) {
        CHECK(to_byte(from_byte(static_cast<std::uint8_t>(b))) == b);
    }
}

TEST_CASE("directory datasets")
{
    const fs::path dir = scratch("dirdata");
    for (int k = 0; k < 3; ++k) {
        PnmImage img{4, 4, 1, std::vector<std::uint8_t>(16, static_cast<std::uint8_t>(k * 100))};
        write_pnm(dir / ("img" + std::to_string(k) + ".pgm"), img);
    }
    std::ofstream(dir / "index.txt") << "img0.pgm 0\n# comment\nimg1.pgm 2\nimg2.pgm 1\n";
    const Dataset d = load_dataset(dir.string(), 0, 0);
    CHECK(d.size() == 3);
    CHECK(d.num_classes == 3);
    CHECK(d.labels == std::vector<int>{0, 2, 1});
    CHECK(d.images[0][0] == -1.0f);

    ModelConfig m;
    m.H = 4;
    m.W = 4;
    m.C = 1;
    m.num_classes = 3;
    CHECK_NOTHROW(check_dataset(d, m));
    m.C = 3;
    CHECK_THROWS_AS(check_dataset(d, m), ConfigError);
    m.C = 1;
    m.num_classes = 2;
    CHECK_THROWS_AS(check_dataset(d, m), ConfigError);

    PnmImage wide{8, 4, 1, std::vector<std::uint8_t>(32, 0)};
    write_pnm(dir / "wide.pgm", wide);
    std::ofstream(dir / "index.txt", std::ios::app) << "wide.pgm 0\n";
    CHECK_THROWS_AS(load_dataset(dir.string(), 0, 0), ConfigError);
    std::ofstream(dir / "index.txt") << "missing.pgm 0\n";
    CHECK_THROWS(load_dataset(dir.string(), 0, 0));
    CHECK_THROWS_AS(load_dataset("no-such-dataset", 0, 0), ConfigError);
}

TEST_CASE("run config text round trip")
{
    RunConfig c = toy_run_config();
    c.model.skip_mode = SkipMode::add;
    c.train.lr = 0.1 + 0.2;
    c.train.dataset = "some/dir";
    c.sampler.guidance_scale = 1.5;
    const std::string text = emit_run_config(c);
    const RunConfig back = parse_run_config(text);
    CHECK(back == c);
    CHECK(emit_run_config(back) == text);

    const RunConfig partial = parse_run_config("# comment\nD = 32 # trailing\n\nnum_classes = 4\n");
    CHECK(partial.model.D == 32);
    CHECK(partial.model.num_classes == 4);
    CHECK(partial.model.L == RunConfig{}.model.L);

    const auto error_of = [](const std::string& text) {
        try {
            parse_run_config(text);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(error_of("D = 32\nwidth = 3\n").find("line 2") != std::string::npos);
    CHECK(error_of("D = 32\nwidth = 3\n").find("width") != std::string::npos);
    CHECK(error_of("D = 32\nD = 64\n").find("repeated") != std::string::npos);
    CHECK(error_of("D = many\n").find("line 1") != std::string::npos);
    CHECK(error_of("learn_sigma = maybe\n") != "");
    CHECK(error_of("D 32\n") != "");
    CHECK(error_of("lr = -1\n") != "");
    CHECK(error_of("skip_mode = sideways\n") != "");
    CHECK(error_of("p = 3\n") != "");
}

TEST_CASE("checkpoint bytes round trip")
{
    const RunConfig config = small_run(3);
    const Dataset data = make_two_gaussians(64, 0);
    const TrainResult r = train(config, data);
    const std::string bytes = encode_checkpoint(r.last);
    const Checkpoint back = decode_checkpoint(bytes);
    CHECK(back == r.last);
    CHECK(encode_checkpoint(back) == bytes);

    const fs::path dir = scratch("ckpt");
    save_checkpoint(dir / "a.dis", r.last);
    const Checkpoint loaded = load_checkpoint(dir / "a.dis");
    save_checkpoint(dir / "b.dis", loaded);
    CHECK(read_bytes(dir / "a.dis") == read_bytes(dir / "b.dis"));
    CHECK(loaded.step == 3);
    CHECK(loaded.adam_steps == 3);
    CHECK(checkpoint_config(loaded) == config);

    for (std::size_t cut : {std::size_t(0), std::size_t(5), std::size_t(9), std::size_t(40), bytes.size() / 2,
                            bytes.size() - 1}) {
        CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, cut)), FormatError);
    }
    CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), FormatError);
    std::string bad_version = bytes;
    bad_version[8] = 9;
    try {
        decode_checkpoint(bad_version);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("version 9") != std::string::npos);
    }
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);
}

TEST_CASE("restoring into a different model config fails loudly")
{
    const RunConfig config = small_run(2);
    const Dataset data = make_two_gaussians(64, 0);
    const Checkpoint ckpt = train(config, data).last;

    RunConfig other = config;
    other.model.L = 5;
    Rng rng(0, 0);
    DisModel<float> model(other.model, rng);
    AdamW<float> adam(model.params(), {});
    Ema<float> ema(model.params(), 0.5);
    CHECK_THROWS_AS(restore_checkpoint(ckpt, other, model.params(), adam, ema), ConfigError);

    Rng rng2(0, 0);
    DisModel<float> same(config.model, rng2);
    AdamW<float> adam2(same.params(), {});
    Ema<float> ema2(same.params(), 0.5);
    restore_checkpoint(ckpt, config, same.params(), adam2, ema2);
    CHECK(adam2.steps() == 2);
    CHECK(capture_checkpoint(config, 2, ckpt.rng_state, same.params(), adam2, ema2).params == ckpt.params);

    const LoadedModel ema_model = load_model(ckpt);
    const LoadedModel raw_model = load_model(ckpt, false);
    const auto find = [](const std::vector<TensorRecord>& table, const std::string& name) {
        for (const auto& rec : table) {
            if (rec.name == name) {
                return rec.data;
            }
        }
        FAIL("missing " << name);
        return std::vector<float>{};
    };
    const auto& w = ema_model.model.params().get("decoder.weight");
    const auto& raw = raw_model.model.params().get("decoder.weight");
    CHECK(std::vector<float>(w.values().begin(), w.values().end()) == find(ckpt.ema, "decoder.weight"));
    CHECK(std::vector<float>(raw.values().begin(), raw.values().end()) == find(ckpt.params, "decoder.weight"));
    CHECK(find(ckpt.ema, "decoder.weight") != find(ckpt.params, "decoder.weight"));
}

TEST_CASE("training writes a deterministic run directory")
{
    RunConfig config = small_run(12);
    config.train.checkpoint_every = 5;
    const Dataset data = make_two_gaussians(64, 0);
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    train(config, data, {a, {}, {}});
    train(config, data, {b, {}, {}});
    for (const char* f : {"config.txt", "metrics.csv", "checkpoint_000005.dis", "checkpoint_000010.dis", "final.dis"}) {
        INFO(f);
        REQUIRE(fs::exists(a / f));
        CHECK(read_bytes(a / f) == read_bytes(b / f));
    }
    CHECK(!fs::exists(a / "checkpoint_000012.dis"));
    CHECK(parse_run_config(read_bytes(a / "config.txt")) == config);

    std::istringstream csv(read_bytes(a / "metrics.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == kMetricsHeader);
    int expected_step = 1;
    while (std::getline(csv, line)) {
        CHECK(std::stoi(line.substr(0, line.find(','))) == expected_step);
        CHECK(line.substr(line.rfind(',') + 1) == "0.000");
        ++expected_step;
    }
    CHECK(expected_step == 13);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run")
{
    RunConfig config = small_run(10);
    config.train.checkpoint_every = 4;
    config.train.hflip = true;
    const Dataset data = make_two_gaussians(64, 0);
    const fs::path a = scratch("resume_a"), b = scratch("resume_b");
    train(config, data, {a, {}, {}});
    train(config, data, {b, a / "checkpoint_000004.dis", {}});
    CHECK(read_bytes(a / "final.dis") == read_bytes(b / "final.dis"));
    CHECK(read_bytes(a / "checkpoint_000008.dis") == read_bytes(b / "checkpoint_000008.dis"));

    RunConfig wider = config;
    wider.model.D = 24;
    CHECK_THROWS_AS(train(wider, data, {scratch("resume_c"), a / "checkpoint_000004.dis", {}}), ConfigError);
}

TEST_CASE("full condition dropout hides every real class")
{
    RunConfig config = small_run(6);
    config.train.cond_dropout = 1.0;
    const Dataset data = make_two_gaussians(64, 0);
    std::int64_t calls = 0;
    TrainOptions opts;
    opts.hooks.on_classes = [&](std::int64_t, const std::vector<int>& classes) {
        ++calls;
        CHECK(classes.size() == 8);
        for (int c : classes) {
            CHECK(c == config.model.null_class());
        }
    };
    train(config, data, opts);
    CHECK(calls == 6);

    config.train.cond_dropout = 0.0;
    std::set<int> seen;
    opts.hooks.on_classes = [&](std::int64_t, const std::vector<int>& classes) {
        seen.insert(classes.begin(), classes.end());
    };
    train(config, data, opts);
    CHECK(seen == std::set<int>{0, 1});
}

TEST_CASE("non-finite loss aborts and names the step")
{
    const RunConfig config = small_run(6);
    const Dataset data = make_two_gaussians(64, 0);
    const fs::path dir = scratch("nan");
    TrainOptions opts{dir, {}, {}};
    opts.hooks.loss_filter = [](std::int64_t step, double loss) { return step == 3 ? std::nan("") : loss; };
    try {
        train(config, data, opts);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step 3") != std::string::npos);
    }
    std::istringstream csv(read_bytes(dir / "metrics.csv"));
    std::string line;
    int rows = -1;
    while (std::getline(csv, line)) {
        ++rows;
    }
    CHECK(rows == 2);
}

TEST_CASE("dataset geometry must match the model")
{
    RunConfig config = small_run(1);
    config.model.H = 16;
    config.model.W = 16;
    CHECK_THROWS_AS(train(config, make_two_gaussians(8, 0)), ConfigError);
}

TEST_CASE("200 toy steps reduce the smoothed loss for three seeds")
{
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        RunConfig config = toy_run_config();
        config.train.seed = seed;
        config.train.steps = 200;
        config.train.checkpoint_every = 0;
        const Dataset data = make_two_gaussians(std::size_t(config.train.dataset_size), seed);
        const TrainResult r = train(config, data);
        CAPTURE(seed);
        CAPTURE(r.smoothed_initial);
        CAPTURE(r.smoothed_final);
        CHECK(r.window == 20);
        CHECK(r.smoothed_final < r.smoothed_initial);
    }
}
