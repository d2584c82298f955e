#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace smoe {

struct GradCheckReport {
    std::string component;
    double max_rel_err = 0.0;
};

// Central-difference checks of every hand-derived gradient on small
// instances (spatial size <= 6x6). Relative error uses
// |fd - analytic| / max(|fd|, |analytic|, 1e-4).
std::vector<GradCheckReport> run_gradcheck(uint64_t seed);

// Convenience: max over all components.
double gradcheck_worst(const std::vector<GradCheckReport>& reports);

}  // namespace smoe
