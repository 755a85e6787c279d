#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dis/model.hpp"

namespace dis {

inline constexpr const char* kBenchHeader = "kernel,J,D,N,counted_macs,formula_macs,wall_ns";

/// One kernel timed at one sequence length. For "ssm" the counter is the
/// formula-scope scan tally over inner width 2D; for "attention" it is every
/// matrix product of the reference block.
struct BenchRecord {
    std::string kernel;
    Index J = 0;
    Index D = 0;
    Index N = 0;
    std::int64_t counted_macs = 0;
    std::int64_t formula_macs = 0;
    std::int64_t wall_ns = 0; // median over repeats
    int repeats = 0;
};

/// Runs the scan and the attention block at every J on random inputs.
/// ContractError unless J_list is strictly increasing with at least
/// `min_points` entries and repeats >= 5.
std::vector<BenchRecord> run_scaling_sweep(const std::vector<Index>& J_list, Index D, Index N, int repeats = 5,
                                           std::uint64_t seed = 0, std::size_t min_points = 4);

std::string sweep_csv(const std::vector<BenchRecord>& records);
/// Human-readable table; adds the whole-block MAC count for each SSM row.
std::string sweep_table(const std::vector<BenchRecord>& records);

/// Least squares y = slope * x. R² is the centred coefficient of determination.
struct OriginFit {
    double slope = 0;
    double r2 = 0;
};
OriginFit fit_through_origin(const std::vector<double>& x, const std::vector<double>& y);

/// Least squares y = c0 + c1 x + c2 x² via column-pivoting QR.
struct QuadraticFit {
    double c0 = 0;
    double c1 = 0;
    double c2 = 0;
    double r2 = 0;
};
QuadraticFit fit_quadratic(const std::vector<double>& x, const std::vector<double>& y);

struct ScalingSummary {
    OriginFit ssm_linear;
    QuadraticFit ssm_quadratic;
    double ssm_quadratic_share = 0; // |c2| J_max² over the count at J_max
    QuadraticFit attention;
    double attention_c2_target = 0; // 2D
    double attention_c2_rel_error = 0;
};
ScalingSummary summarize_sweep(const std::vector<BenchRecord>& records);

/// wall(J_to) / wall(J_from) for one kernel; nullopt when either row is absent.
std::optional<double> time_ratio(const std::vector<BenchRecord>& records, const std::string& kernel, Index J_from,
                                 Index J_to);

/// One scaling-table row measured at 32x32x3, p = 4, unconditional, batch 1.
struct GflopsReport {
    std::string name;
    ModelConfig config;
    Index params = 0;
    double ref_params = 0;
    std::int64_t macs = 0;
    std::optional<std::int64_t> instrumented_macs;
    double gflops = 0;
    double ref_gflops = 0;
};

inline constexpr double kParamBand = 0.20;
inline constexpr double kGflopsBand = 0.25;

/// |measured / reference - 1| <= band.
bool within_band(double measured, double reference, double band);

/// MACs of one instrumented forward pass of a freshly initialised model.
std::int64_t instrumented_forward_macs(const ModelConfig& config);

/// Closed-form report; `instrument` also runs the counted forward pass.
GflopsReport model_gflops(const ScaleRow& row, bool instrument = false);
std::vector<GflopsReport> model_gflops_reports(bool instrument_smallest = true);
std::string gflops_table(const std::vector<GflopsReport>& reports);

} // namespace dis
