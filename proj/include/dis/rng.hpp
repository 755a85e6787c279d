#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace dis {

/// Seeded random stream. Independent streams are derived from (seed, stream id)
/// so that data order, noise draws and initialization never interfere.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
    {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x5eedu};
        engine_.seed(seq);
    }

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }

    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

    /// Normal draw rejected outside ±2 standard deviations.
    double truncated_normal(double stddev)
    {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) {
                return z * stddev;
            }
        }
    }

    template <typename Scalar>
    std::vector<Scalar> normal_vector(std::size_t n)
    {
        std::vector<Scalar> out(n);
        for (auto& v : out) {
            v = static_cast<Scalar>(normal());
        }
        return out;
    }

    std::mt19937_64& engine() { return engine_; }

    std::string serialize() const
    {
        std::ostringstream out;
        out << engine_ << ' ' << normal_ << ' ' << uniform_;
        return out.str();
    }

    void deserialize(const std::string& text)
    {
        std::istringstream in(text);
        in >> engine_ >> normal_ >> uniform_;
    }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

} // namespace dis
