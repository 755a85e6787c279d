#pragma once

#include <cstdint>

namespace dis {

/// Multiply-accumulate tallies collected during forward passes.
///
/// `total` counts every matrix product, convolution tap and scan multiply that
/// is actually executed. `ssm_formula` counts selective-scan work under the
/// closed-form convention 3·N + N² per (step, channel): three products for
/// discretization/input/readout plus a dense N×N state transition. Elementwise
/// nonlinearities, normalization and additions are never counted.
struct MacTally {
    std::int64_t total = 0;
    std::int64_t ssm_formula = 0;
};

namespace detail {
inline thread_local MacTally* active_tally = nullptr;
}

/// Installs a tally on the current thread for its lifetime. Nested counters
/// each see the work done while they are active.
class MacCounter {
public:
    MacCounter() : previous_(detail::active_tally) { detail::active_tally = &tally_; }
    ~MacCounter()
    {
        detail::active_tally = previous_;
        if (previous_) {
            previous_->total += tally_.total;
            previous_->ssm_formula += tally_.ssm_formula;
        }
    }
    MacCounter(const MacCounter&) = delete;
    MacCounter& operator=(const MacCounter&) = delete;

    const MacTally& tally() const { return tally_; }

private:
    MacTally tally_;
    MacTally* previous_;
};

inline void count_macs(std::int64_t n)
{
    if (detail::active_tally) {
        detail::active_tally->total += n;
    }
}

inline void count_ssm_formula_macs(std::int64_t n)
{
    if (detail::active_tally) {
        detail::active_tally->ssm_formula += n;
    }
}

} // namespace dis
