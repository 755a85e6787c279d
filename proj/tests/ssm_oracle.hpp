#pragma once

// Brute-force reference for the selective scan. Everything is recomputed with
// plain loops in double precision: projections, softplus, the ZOH matrices for
// every step, then the recurrence unrolled. Shares nothing with the library
// path except the parameter layout.

#include <cmath>
#include <vector>

#include "dis/rng.hpp"

namespace dis::testing {

struct OracleDirection {
    int inner = 0;
    int state = 0;
    int rank = 0;
    std::vector<double> a_log;   // [inner, state]
    std::vector<double> x_proj;  // [inner, rank + 2 state]
    std::vector<double> dt_proj; // [rank, inner]
    std::vector<double> dt_bias; // [inner]
    std::vector<double> d_skip;  // [inner]
};

inline OracleDirection random_direction(int inner, int state, int rank, Rng& rng)
{
    OracleDirection p{inner, state, rank, {}, {}, {}, {}, {}};
    for (int i = 0; i < inner * state; ++i) {
        p.a_log.push_back(0.5 * rng.normal());
    }
    for (int i = 0; i < inner * (rank + 2 * state); ++i) {
        p.x_proj.push_back(0.5 * rng.normal());
    }
    for (int i = 0; i < rank * inner; ++i) {
        p.dt_proj.push_back(0.5 * rng.normal());
    }
    for (int i = 0; i < inner; ++i) {
        p.dt_bias.push_back(rng.normal() - 1.0);
        p.d_skip.push_back(rng.normal());
    }
    return p;
}

/// x is [steps, inner] row-major; returns y of the same layout.
inline std::vector<double> unrolled_scan(const std::vector<double>& x, int steps, const OracleDirection& p)
{
    const int width = p.rank + 2 * p.state;
    std::vector<std::vector<double>> delta(steps, std::vector<double>(p.inner));
    std::vector<std::vector<double>> bmat(steps, std::vector<double>(p.state));
    std::vector<std::vector<double>> cmat(steps, std::vector<double>(p.state));
    for (int t = 0; t < steps; ++t) {
        std::vector<double> proj(width, 0.0);
        for (int j = 0; j < width; ++j) {
            for (int d = 0; d < p.inner; ++d) {
                proj[j] += x[t * p.inner + d] * p.x_proj[d * width + j];
            }
        }
        for (int d = 0; d < p.inner; ++d) {
            double pre = p.dt_bias[d];
            for (int r = 0; r < p.rank; ++r) {
                pre += proj[r] * p.dt_proj[r * p.inner + d];
            }
            delta[t][d] = std::log(1.0 + std::exp(pre));
        }
        for (int n = 0; n < p.state; ++n) {
            bmat[t][n] = proj[p.rank + n];
            cmat[t][n] = proj[p.rank + p.state + n];
        }
    }

    // Materialize A_bar_t and B_bar_t for every step before running the recurrence.
    std::vector<std::vector<double>> a_bar(steps, std::vector<double>(p.inner * p.state));
    std::vector<std::vector<double>> b_bar(steps, std::vector<double>(p.inner * p.state));
    for (int t = 0; t < steps; ++t) {
        for (int d = 0; d < p.inner; ++d) {
            for (int n = 0; n < p.state; ++n) {
                const double a = -std::exp(p.a_log[d * p.state + n]);
                const double da = delta[t][d] * a;
                a_bar[t][d * p.state + n] = std::exp(da);
                b_bar[t][d * p.state + n] = (std::exp(da) - 1.0) / da * delta[t][d] * bmat[t][n];
            }
        }
    }

    std::vector<double> y(x.size(), 0.0);
    std::vector<double> h(p.inner * p.state, 0.0);
    for (int t = 0; t < steps; ++t) {
        for (int d = 0; d < p.inner; ++d) {
            double acc = 0.0;
            for (int n = 0; n < p.state; ++n) {
                const int k = d * p.state + n;
                h[k] = a_bar[t][k] * h[k] + b_bar[t][k] * x[t * p.inner + d];
                acc += cmat[t][n] * h[k];
            }
            y[t * p.inner + d] = acc + p.d_skip[d] * x[t * p.inner + d];
        }
    }
    return y;
}

} // namespace dis::testing
