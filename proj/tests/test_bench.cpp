#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "dis/bench.hpp"
#include "dis/commands.hpp"

using namespace dis;

namespace {

std::vector<std::string> lines(const std::string& text)
{
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        out.push_back(line);
    }
    return out;
}

} // namespace

TEST_CASE("zero-intercept fit")
{
    const auto exact = fit_through_origin({1, 2, 3, 4}, {3, 6, 9, 12});
    CHECK(exact.slope == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(exact.r2 == doctest::Approx(1.0).epsilon(1e-15));

    // slope = sum(xy) / sum(x²) = 30.5 / 30
    const auto noisy = fit_through_origin({1, 2, 3, 4}, {1.5, 2, 3, 4});
    CHECK(noisy.slope == doctest::Approx(30.5 / 30.0).epsilon(1e-14));
    CHECK(noisy.r2 < 1.0);

    const auto offset = fit_through_origin({1, 2, 3, 4}, {11, 12, 13, 14});
    CHECK(offset.r2 < 0.9);
    CHECK_THROWS_AS((void)fit_through_origin({1}, {1, 2}), ContractError);
}

TEST_CASE("quadratic fit recovers polynomial coefficients")
{
    std::vector<double> x, y;
    for (double j : {64.0, 128.0, 256.0, 512.0}) {
        x.push_back(j);
        y.push_back(17.0 + 4.5 * j + 768.0 * j * j);
    }
    const auto q = fit_quadratic(x, y);
    CHECK(q.c2 == doctest::Approx(768.0).epsilon(1e-9));
    CHECK(q.c1 == doctest::Approx(4.5).epsilon(1e-6));
    CHECK(q.r2 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS((void)fit_quadratic({1, 2}, {1, 2}), ContractError);
}

TEST_CASE("default sweep rows, counts and fits")
{
    const auto records = run_scaling_sweep({64, 128, 256, 512}, 384, 16);
    REQUIRE(records.size() == 8);
    int ssm = 0;
    int attention = 0;
    for (const auto& r : records) {
        CAPTURE(r.J);
        CHECK(r.counted_macs == r.formula_macs);
        CHECK(r.repeats == 5);
        CHECK(r.wall_ns > 0);
        if (r.kernel == "ssm") {
            ++ssm;
            CHECK(r.formula_macs == flops_ssm(r.J, 384, 16));
        } else {
            ++attention;
            CHECK(r.formula_macs == flops_attention(r.J, 384));
        }
    }
    CHECK(ssm == 4);
    CHECK(attention == 4);

    const auto rows = lines(sweep_csv(records));
    REQUIRE(rows.size() == 9);
    CHECK(rows[0] == kBenchHeader);
    CHECK(rows[1].rfind("ssm,64,384,16,14942208,14942208,", 0) == 0);
    CHECK(rows[2].rfind("attention,64,384,0,40894464,40894464,", 0) == 0);

    const auto s = summarize_sweep(records);
    CHECK(s.ssm_linear.r2 > 0.9999);
    CHECK(s.ssm_linear.slope == doctest::Approx(double(flops_ssm(1, 384, 16))).epsilon(1e-12));
    CHECK(s.ssm_quadratic_share < 1e-6);
    CHECK(s.attention_c2_target == 768.0);
    CHECK(s.attention_c2_rel_error < 0.05);

    CHECK(sweep_table(records).find("whole block") != std::string::npos);
}

TEST_CASE("counts depend on shapes only")
{
    const auto a = run_scaling_sweep({8, 16, 32, 64}, 24, 4, 5, 1);
    const auto b = run_scaling_sweep({8, 16, 32, 64}, 24, 4, 5, 99);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].counted_macs == b[i].counted_macs);
        CHECK(a[i].counted_macs == a[i].formula_macs);
    }
}

TEST_CASE("sweep contracts")
{
    CHECK_THROWS_AS((void)run_scaling_sweep({64, 128, 256}, 16, 4), ContractError);
    CHECK_THROWS_AS((void)run_scaling_sweep({64, 32, 256, 512}, 16, 4), ContractError);
    CHECK_THROWS_AS((void)run_scaling_sweep({8, 16, 32, 64}, 16, 4, 4), ContractError);
    CHECK_THROWS_AS((void)run_scaling_sweep({8, 16, 32, 64}, 0, 4), ContractError);
}

TEST_CASE("scan wall time grows sub-quadratically")
{
    const auto records = run_scaling_sweep({128, 256, 512, 1024}, 128, 16, 7);
    const auto ratio = time_ratio(records, "ssm", 256, 1024);
    REQUIRE(ratio.has_value());
    CAPTURE(*ratio);
    CHECK(*ratio < 8.0);
    CHECK_FALSE(time_ratio(records, "ssm", 256, 2048).has_value());
}

TEST_CASE("parameter and gflops reports")
{
    const auto reports = model_gflops_reports(true);
    REQUIRE(reports.size() == 5);
    const char* names[] = {"S", "B", "M", "L", "H"};
    for (std::size_t i = 0; i < reports.size(); ++i) {
        CAPTURE(reports[i].name);
        CHECK(reports[i].name == names[i]);
        CHECK(reports[i].params == param_count(reports[i].config));
        CHECK(within_band(double(reports[i].params), reports[i].ref_params, kParamBand));
        CHECK(reports[i].gflops == doctest::Approx(double(reports[i].macs) / 1e9).epsilon(1e-15));
    }
    REQUIRE(reports[0].instrumented_macs.has_value());
    CHECK(*reports[0].instrumented_macs == reports[0].macs);
    CHECK_FALSE(reports[1].instrumented_macs.has_value());

    // S and B share L and differ by a factor 2 in D.
    CHECK(reports[0].config.L == reports[1].config.L);
    CHECK(reports[1].config.D == 2 * reports[0].config.D);
    const double growth = reports[1].gflops / reports[0].gflops;
    CAPTURE(growth);
    CHECK(growth > 3.5);
    CHECK(growth < 4.5);

    const auto table = gflops_table(reports);
    for (const char* n : names) {
        CHECK(table.find(std::string("\n") + n + " ") != std::string::npos);
    }
}

TEST_CASE("within_band")
{
    CHECK(within_band(1.2, 1.0, 0.2));
    CHECK(within_band(0.8, 1.0, 0.2));
    CHECK_FALSE(within_band(1.21, 1.0, 0.2));
    CHECK_FALSE(within_band(0.79, 1.0, 0.2));
}

TEST_CASE("J list parsing")
{
    CHECK(parse_j_list("64,128,256,512") == std::vector<Index>{64, 128, 256, 512});
    CHECK(parse_j_list("7") == std::vector<Index>{7});
    for (const char* bad : {"", "64,abc", "64,,128", "64,", ",64", "0", "-8", "64;128", "1.5", "64x"}) {
        CAPTURE(bad);
        CHECK_THROWS_AS((void)parse_j_list(bad), ConfigError);
    }
}
