#include "dis/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <Eigen/Dense>

#include "dis/mac_counter.hpp"

namespace dis {

namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
std::int64_t median_ns(int repeats, F&& run)
{
    std::vector<std::int64_t> times;
    for (int r = 0; r < repeats; ++r) {
        const auto t0 = Clock::now();
        run();
        times.push_back(std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

Tensor<float> normal_tensor(Shape shape, Rng& rng, double scale = 1.0)
{
    std::vector<float> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) {
        x = static_cast<float>(scale * rng.normal());
    }
    return Tensor<float>(std::move(shape), std::move(v));
}

BenchRecord bench_ssm(Index J, Index D, Index N, int repeats, Rng& rng)
{
    const Index inner = 2 * D;
    const Tensor<float> u = normal_tensor({J, inner}, rng);
    std::vector<float> dt(static_cast<std::size_t>(J * inner));
    for (auto& v : dt) {
        v = static_cast<float>(std::exp(std::log(1e-3) + rng.uniform() * (std::log(0.1) - std::log(1e-3))));
    }
    const Tensor<float> delta({J, inner}, std::move(dt));
    std::vector<float> av(static_cast<std::size_t>(inner * N));
    for (Index i = 0; i < inner * N; ++i) {
        av[static_cast<std::size_t>(i)] = -static_cast<float>(i % N + 1);
    }
    const Tensor<float> a({inner, N}, std::move(av));
    const Tensor<float> b = normal_tensor({J, N}, rng);
    const Tensor<float> c = normal_tensor({J, N}, rng);
    const Tensor<float> d = normal_tensor({inner}, rng);

    NoGradGuard no_grad;
    BenchRecord rec{"ssm", J, D, N, 0, flops_ssm(J, D, N), 0, repeats};
    rec.wall_ns = median_ns(repeats, [&] {
        MacCounter counter;
        (void)selective_scan_kernel(u, delta, a, b, c, d);
        rec.counted_macs = counter.tally().ssm_formula;
    });
    return rec;
}

BenchRecord bench_attention(Index J, Index D, int repeats, Rng& rng)
{
    const AttentionParams<float> p = init_attention<float>(D, rng);
    const Tensor<float> x = normal_tensor({J, D}, rng);
    NoGradGuard no_grad;
    BenchRecord rec{"attention", J, D, 0, 0, flops_attention(J, D), 0, repeats};
    rec.wall_ns = median_ns(repeats, [&] {
        MacCounter counter;
        (void)attention_reference(x, p);
        rec.counted_macs = counter.tally().total;
    });
    return rec;
}

std::vector<const BenchRecord*> rows_of(const std::vector<BenchRecord>& records, const std::string& kernel)
{
    std::vector<const BenchRecord*> out;
    for (const auto& r : records) {
        if (r.kernel == kernel) {
            out.push_back(&r);
        }
    }
    return out;
}

double centred_r2(const std::vector<double>& y, const std::vector<double>& fitted)
{
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / double(y.size());
    double ss_res = 0;
    double ss_tot = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        ss_res += (y[i] - fitted[i]) * (y[i] - fitted[i]);
        ss_tot += (y[i] - mean) * (y[i] - mean);
    }
    return ss_tot > 0 ? 1.0 - ss_res / ss_tot : (ss_res == 0 ? 1.0 : 0.0);
}

std::string human(double v)
{
    char buf[32];
    if (std::abs(v) >= 1e9) {
        std::snprintf(buf, sizeof buf, "%.2fG", v / 1e9);
    } else if (std::abs(v) >= 1e6) {
        std::snprintf(buf, sizeof buf, "%.2fM", v / 1e6);
    } else if (std::abs(v) >= 1e3) {
        std::snprintf(buf, sizeof buf, "%.2fK", v / 1e3);
    } else {
        std::snprintf(buf, sizeof buf, "%.0f", v);
    }
    return buf;
}

} // namespace

std::vector<BenchRecord> run_scaling_sweep(const std::vector<Index>& J_list, Index D, Index N, int repeats,
                                           std::uint64_t seed, std::size_t min_points)
{
    if (J_list.size() < min_points) {
        throw ContractError("scaling sweep needs at least " + std::to_string(min_points) + " sequence lengths");
    }
    for (std::size_t i = 0; i < J_list.size(); ++i) {
        if (J_list[i] < 1 || (i > 0 && J_list[i] <= J_list[i - 1])) {
            throw ContractError("sequence lengths must be positive and strictly increasing");
        }
    }
    if (D < 1 || N < 1) {
        throw ContractError("D and N must be positive");
    }
    if (repeats < 5) {
        throw ContractError("at least 5 timing repeats are required");
    }
    Rng rng(seed, 5);
    std::vector<BenchRecord> records;
    for (Index J : J_list) {
        records.push_back(bench_ssm(J, D, N, repeats, rng));
        records.push_back(bench_attention(J, D, repeats, rng));
    }
    return records;
}

std::string sweep_csv(const std::vector<BenchRecord>& records)
{
    std::string out = std::string(kBenchHeader) + "\n";
    char buf[256];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%s,%lld,%lld,%lld,%lld,%lld,%lld\n", r.kernel.c_str(),
                      static_cast<long long>(r.J), static_cast<long long>(r.D), static_cast<long long>(r.N),
                      static_cast<long long>(r.counted_macs), static_cast<long long>(r.formula_macs),
                      static_cast<long long>(r.wall_ns));
        out += buf;
    }
    return out;
}

std::string sweep_table(const std::vector<BenchRecord>& records)
{
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-10s %6s %5s %4s %16s %16s %16s %12s\n", "kernel", "J", "D", "N", "counted",
                  "formula", "whole block", "median ms");
    out += buf;
    for (const auto& r : records) {
        std::string block = "-";
        if (r.kernel == "ssm") {
            ModelConfig c;
            c.D = static_cast<int>(r.D);
            c.N = static_cast<int>(r.N);
            block = std::to_string(block_macs(c, r.J));
        }
        std::snprintf(buf, sizeof buf, "%-10s %6lld %5lld %4lld %16lld %16lld %16s %12.3f\n", r.kernel.c_str(),
                      static_cast<long long>(r.J), static_cast<long long>(r.D), static_cast<long long>(r.N),
                      static_cast<long long>(r.counted_macs), static_cast<long long>(r.formula_macs), block.c_str(),
                      double(r.wall_ns) / 1e6);
        out += buf;
    }
    return out;
}

OriginFit fit_through_origin(const std::vector<double>& x, const std::vector<double>& y)
{
    if (x.size() != y.size() || x.size() < 2) {
        throw ContractError("fit needs at least two paired points");
    }
    double sxy = 0;
    double sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += x[i] * y[i];
        sxx += x[i] * x[i];
    }
    OriginFit fit;
    fit.slope = sxy / sxx;
    std::vector<double> fitted(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        fitted[i] = fit.slope * x[i];
    }
    fit.r2 = centred_r2(y, fitted);
    return fit;
}

QuadraticFit fit_quadratic(const std::vector<double>& x, const std::vector<double>& y)
{
    if (x.size() != y.size() || x.size() < 3) {
        throw ContractError("quadratic fit needs at least three paired points");
    }
    const auto n = static_cast<Eigen::Index>(x.size());
    Eigen::MatrixXd V(n, 3);
    Eigen::VectorXd Y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double xi = x[static_cast<std::size_t>(i)];
        V(i, 0) = 1.0;
        V(i, 1) = xi;
        V(i, 2) = xi * xi;
        Y(i) = y[static_cast<std::size_t>(i)];
    }
    const Eigen::Vector3d c = V.colPivHouseholderQr().solve(Y);
    QuadraticFit fit{c(0), c(1), c(2), 0};
    std::vector<double> fitted(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        fitted[i] = c(0) + c(1) * x[i] + c(2) * x[i] * x[i];
    }
    fit.r2 = centred_r2(y, fitted);
    return fit;
}

ScalingSummary summarize_sweep(const std::vector<BenchRecord>& records)
{
    const auto ssm = rows_of(records, "ssm");
    const auto att = rows_of(records, "attention");
    if (ssm.size() < 3 || att.size() < 3) {
        throw ContractError("sweep summary needs at least three rows per kernel");
    }
    ScalingSummary s;
    std::vector<double> x;
    std::vector<double> y;
    for (const auto* r : ssm) {
        x.push_back(double(r->J));
        y.push_back(double(r->counted_macs));
    }
    s.ssm_linear = fit_through_origin(x, y);
    s.ssm_quadratic = fit_quadratic(x, y);
    s.ssm_quadratic_share = std::abs(s.ssm_quadratic.c2) * x.back() * x.back() / y.back();

    x.clear();
    y.clear();
    for (const auto* r : att) {
        x.push_back(double(r->J));
        y.push_back(double(r->counted_macs));
    }
    s.attention = fit_quadratic(x, y);
    s.attention_c2_target = 2.0 * double(att.front()->D);
    s.attention_c2_rel_error = std::abs(s.attention.c2 / s.attention_c2_target - 1.0);
    return s;
}

std::optional<double> time_ratio(const std::vector<BenchRecord>& records, const std::string& kernel, Index J_from,
                                 Index J_to)
{
    const BenchRecord* from = nullptr;
    const BenchRecord* to = nullptr;
    for (const auto& r : records) {
        if (r.kernel == kernel && r.J == J_from) {
            from = &r;
        }
        if (r.kernel == kernel && r.J == J_to) {
            to = &r;
        }
    }
    if (!from || !to || from->wall_ns <= 0) {
        return std::nullopt;
    }
    return double(to->wall_ns) / double(from->wall_ns);
}

bool within_band(double measured, double reference, double band)
{
    return std::abs(measured / reference - 1.0) <= band;
}

std::int64_t instrumented_forward_macs(const ModelConfig& config)
{
    Rng rng(0, 0);
    const DisModel<float> model(config, rng);
    const auto x = Tensor<float>::zeros({1, config.H, config.W, config.C});
    std::vector<int> classes;
    if (config.num_classes > 0) {
        classes.push_back(0);
    }
    NoGradGuard no_grad;
    MacCounter counter;
    (void)model.forward(x, {config.num_timesteps / 2}, classes);
    return counter.tally().total;
}

GflopsReport model_gflops(const ScaleRow& row, bool instrument)
{
    GflopsReport r;
    r.name = row.name;
    r.config = row.config;
    r.params = param_count(row.config);
    r.ref_params = row.ref_params;
    r.macs = forward_macs(row.config, 1);
    if (instrument) {
        r.instrumented_macs = instrumented_forward_macs(row.config);
    }
    r.gflops = double(r.macs) / 1e9;
    r.ref_gflops = row.ref_gflops;
    return r;
}

std::vector<GflopsReport> model_gflops_reports(bool instrument_smallest)
{
    std::vector<GflopsReport> out;
    bool first = true;
    for (const auto& row : scale_rows()) {
        out.push_back(model_gflops(row, instrument_smallest && first));
        first = false;
    }
    return out;
}

std::string gflops_table(const std::vector<GflopsReport>& reports)
{
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-6s %3s %5s %10s %10s %8s %4s %9s %9s %8s %4s\n", "config", "L", "D", "params",
                  "ref", "dev", "band", "Gflops", "ref", "dev", "band");
    out += buf;
    for (const auto& r : reports) {
        const double pd = double(r.params) / r.ref_params - 1.0;
        const double gd = r.gflops / r.ref_gflops - 1.0;
        std::snprintf(buf, sizeof buf, "%-6s %3d %5d %10s %10s %+7.1f%% %4s %9.3f %9.2f %+7.1f%% %4s\n",
                      r.name.c_str(), r.config.L, r.config.D, human(double(r.params)).c_str(),
                      human(r.ref_params).c_str(), 100 * pd,
                      within_band(double(r.params), r.ref_params, kParamBand) ? "ok" : "out", r.gflops,
                      r.ref_gflops, 100 * gd, within_band(r.gflops, r.ref_gflops, kGflopsBand) ? "ok" : "out");
        out += buf;
    }
    for (const auto& r : reports) {
        if (r.instrumented_macs) {
            std::snprintf(buf, sizeof buf, "%s instrumented forward: %lld MACs (closed form %lld)\n", r.name.c_str(),
                          static_cast<long long>(*r.instrumented_macs), static_cast<long long>(r.macs));
            out += buf;
        }
    }
    return out;
}

} // namespace dis
