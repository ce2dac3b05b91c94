#include "omuda/ablation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

#include "omuda/common.hpp"

namespace omuda::evalx {

AblationGrid load_grid(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open grid file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": invalid JSON: " + e.what());
    }
    AblationGrid grid;
    if (!j.contains("runs") || !j.at("runs").is_array()) {
        throw ConfigError(path + ": grid file needs a top-level \"runs\" array");
    }
    for (const auto& run : j.at("runs")) {
        AblationRunSpec spec;
        if (!run.contains("name") || !run.at("name").is_string()) {
            throw ConfigError(path + ": every grid run needs a \"name\" string");
        }
        spec.name = run.at("name").get<std::string>();
        if (run.contains("set")) {
            if (!run.at("set").is_object()) {
                throw ConfigError(path + ": run \"" + spec.name + "\": \"set\" must be an object");
            }
            spec.set = run.at("set");
        }
        for (const auto& existing : grid.runs) {
            if (existing.name == spec.name) {
                throw ConfigError(path + ": duplicate run name \"" + spec.name + "\"");
            }
        }
        if (spec.name == "base") throw ConfigError(path + ": \"base\" is reserved");
        grid.runs.push_back(std::move(spec));
    }
    return grid;
}

namespace {

config::CliConfig apply_delta(const config::CliConfig& base, const nlohmann::json& delta,
                              std::uint64_t seed) {
    nlohmann::json tree = base.to_json();
    for (const auto& [key, value] : delta.items()) {
        std::string assignment = key + "=" + value.dump();
        config::apply_set(tree, assignment);
    }
    config::apply_set(tree, "train.seed=" + std::to_string(seed));
    auto cfg = config::CliConfig::from_json(tree);
    cfg.validate();
    return cfg;
}

double sample_stddev(std::span<const double> xs, double mean) {
    if (xs.size() < 2) return 0.0;
    double acc = 0.0;
    for (double x : xs) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / (xs.size() - 1));
}

}  // namespace

AblationReport run_ablation(const config::CliConfig& base, const AblationGrid& grid,
                            const trainer::Datasets& data, std::span<const std::uint64_t> seeds,
                            const std::string& out_dir, int parallel_runs) {
    if (seeds.empty()) throw std::invalid_argument("run_ablation: need at least one seed");

    AblationReport report;
    report.base_config = base.to_json();
    report.seeds.assign(seeds.begin(), seeds.end());

    report.variants.emplace_back();
    report.variants[0].name = "base";
    report.variants[0].delta = nlohmann::json::object();
    for (const auto& spec : grid.runs) {
        AblationVariant v;
        v.name = spec.name;
        v.delta = spec.set;
        report.variants.push_back(std::move(v));
    }
    for (auto& v : report.variants) v.runs.resize(seeds.size());

    struct Job {
        std::size_t variant;
        std::size_t seed_index;
    };
    std::vector<Job> jobs;
    for (std::size_t v = 0; v < report.variants.size(); ++v) {
        for (std::size_t s = 0; s < seeds.size(); ++s) jobs.push_back({v, s});
    }

    const int k = data.source.config.k;
    auto execute = [&](const Job& job) {
        auto& result = report.variants[job.variant].runs[job.seed_index];
        result.seed = seeds[job.seed_index];
        result.per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
        try {
            auto cfg = apply_delta(base, report.variants[job.variant].delta, result.seed);
            // Grid runs own the parallelism at the run level.
            cfg.train.workers = 1;
            std::string run_dir;
            if (!out_dir.empty()) {
                run_dir = (std::filesystem::path(out_dir) / "runs" /
                           (report.variants[job.variant].name + "__seed" +
                            std::to_string(result.seed)))
                              .string();
            }
            auto tr = trainer::run_training(cfg.train, data, run_dir);
            result.miou = tr.final_miou;
            if (!tr.evals.empty()) {
                const auto& rep = tr.evals.back().report;
                for (int c = 0; c < k && c < static_cast<int>(rep.per_class.size()); ++c) {
                    result.per_class[c] = rep.per_class[c];
                }
            }
        } catch (const DivergenceError& e) {
            result.diverged = true;
            result.error = e.what();
        }
    };

    int workers = parallel_runs;
    if (workers <= 0) {
        workers = static_cast<int>(std::clamp(std::thread::hardware_concurrency(), 1u, 4u));
    }
    workers = std::min<int>(workers, static_cast<int>(jobs.size()));
    if (workers <= 1) {
        for (const auto& job : jobs) execute(job);
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&]() {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= jobs.size()) break;
                execute(jobs[i]);
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    for (auto& v : report.variants) {
        std::vector<double> mious;
        v.mean_per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
        std::vector<int> class_counts(k, 0);
        std::vector<double> class_sums(k, 0.0);
        for (const auto& run : v.runs) {
            if (run.diverged) continue;
            mious.push_back(run.miou);
            for (int c = 0; c < k; ++c) {
                if (!std::isnan(run.per_class[c])) {
                    class_sums[c] += run.per_class[c];
                    class_counts[c]++;
                }
            }
        }
        if (!mious.empty()) {
            v.mean_miou = std::accumulate(mious.begin(), mious.end(), 0.0) / mious.size();
            v.stddev_miou = sample_stddev(mious, v.mean_miou);
        }
        for (int c = 0; c < k; ++c) {
            if (class_counts[c] > 0) v.mean_per_class[c] = class_sums[c] / class_counts[c];
        }
    }

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        nlohmann::json out = {{"base_config", report.base_config},
                              {"seeds", report.seeds},
                              {"variants", nlohmann::json::array()}};
        for (const auto& v : report.variants) {
            nlohmann::json variant = {{"name", v.name},
                                      {"delta", v.delta},
                                      {"mean_miou", v.mean_miou},
                                      {"stddev_miou", v.stddev_miou},
                                      {"runs", nlohmann::json::array()}};
            nlohmann::json per_class = nlohmann::json::object();
            const auto& names = data.source.config.class_names;
            for (int c = 0; c < k; ++c) {
                if (std::isnan(v.mean_per_class[c])) {
                    per_class[names[c]] = nullptr;
                } else {
                    per_class[names[c]] = v.mean_per_class[c];
                }
            }
            variant["mean_per_class_iou"] = per_class;
            for (const auto& run : v.runs) {
                nlohmann::json r = {{"seed", run.seed}, {"diverged", run.diverged}};
                if (run.diverged) {
                    r["error"] = run.error;
                } else {
                    r["miou"] = run.miou;
                }
                variant["runs"].push_back(std::move(r));
            }
            out["variants"].push_back(std::move(variant));
        }
        std::ofstream jf(std::filesystem::path(out_dir) / "ablation.json", std::ios::binary);
        jf << out.dump(2) << "\n";

        std::ofstream tf(std::filesystem::path(out_dir) / "ablation.txt", std::ios::binary);
        tf << format_ablation_table(report, data.source.config.class_names);
    }
    return report;
}

std::string format_ablation_table(const AblationReport& report,
                                  const std::vector<std::string>& class_names) {
    std::size_t name_width = 7;
    for (const auto& v : report.variants) name_width = std::max(name_width, v.name.size());

    std::string out;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-*s", static_cast<int>(name_width + 2), "variant");
    out += buf;
    for (const auto& n : class_names) {
        std::snprintf(buf, sizeof(buf), "%*s", 8, n.substr(0, 7).c_str());
        out += buf;
    }
    out += "            mIoU\n";
    for (const auto& v : report.variants) {
        std::snprintf(buf, sizeof(buf), "%-*s", static_cast<int>(name_width + 2), v.name.c_str());
        out += buf;
        for (std::size_t c = 0; c < class_names.size(); ++c) {
            if (std::isnan(v.mean_per_class[c])) {
                std::snprintf(buf, sizeof(buf), "%*s", 8, "--");
            } else {
                std::snprintf(buf, sizeof(buf), "%8.3f", v.mean_per_class[c]);
            }
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), "  %.4f +- %.4f", v.mean_miou, v.stddev_miou);
        out += buf;
        int failed = 0;
        for (const auto& run : v.runs) failed += run.diverged ? 1 : 0;
        if (failed > 0) {
            std::snprintf(buf, sizeof(buf), "  [%d/%zu runs diverged]", failed, v.runs.size());
            out += buf;
        }
        out += "\n";
    }
    return out;
}

}  // namespace omuda::evalx
