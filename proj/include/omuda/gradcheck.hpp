#pragma once

#include <string>
#include <vector>

#include "omuda/numerics.hpp"
#include "omuda/trainer.hpp"

namespace omuda::gradcheck {

struct SuiteEntry {
    std::string name;
    num::GradCheckReport report;
};

// Central-difference verification of every differentiable loss path (L_S,
// L_T, L_M, L_D, L_A, L_Total) against the analytic backward pass, on a
// seeded 3-image 8x8 batch with frozen teacher, extractor, pseudo-labels,
// masks and reliability weights.
std::vector<SuiteEntry> run_suite(const trainer::TrainConfig& cfg, std::uint64_t seed,
                                  double step = 1e-5, double tolerance = 1e-4);

}  // namespace omuda::gradcheck
