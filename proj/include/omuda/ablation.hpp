#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "omuda/config.hpp"
#include "omuda/trainer.hpp"

namespace omuda::evalx {

// A named set of config deltas (dotted key -> value), applied on top of the
// base config for every seed.
struct AblationRunSpec {
    std::string name;
    nlohmann::json set = nlohmann::json::object();
};

struct AblationGrid {
    std::vector<AblationRunSpec> runs;
};

AblationGrid load_grid(const std::string& path);

struct AblationRunResult {
    std::uint64_t seed = 0;
    bool diverged = false;
    std::string error;
    double miou = 0.0;
    std::vector<double> per_class;  // NaN for absent classes
};

struct AblationVariant {
    std::string name;
    nlohmann::json delta;
    std::vector<AblationRunResult> runs;
    double mean_miou = 0.0;
    double stddev_miou = 0.0;
    std::vector<double> mean_per_class;
};

struct AblationReport {
    nlohmann::json base_config;
    std::vector<std::uint64_t> seeds;
    std::vector<AblationVariant> variants;  // variants[0] is the base config
};

// Trains every (variant, seed) pair on the shared datasets; divergence in a
// run is recorded, not propagated. When out_dir is non-empty, writes
// ablation.json and an aligned ablation.txt table there.
AblationReport run_ablation(const config::CliConfig& base, const AblationGrid& grid,
                            const trainer::Datasets& data, std::span<const std::uint64_t> seeds,
                            const std::string& out_dir = "", int parallel_runs = 0);

std::string format_ablation_table(const AblationReport& report,
                                  const std::vector<std::string>& class_names);

}  // namespace omuda::evalx
