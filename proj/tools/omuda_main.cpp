// omuda: synthetic-benchmark UDA training engine for semantic segmentation.
//
// Subcommands: generate, train, evaluate, ablate, gradcheck. All diagnostics
// go to stderr; machine-readable output goes to stdout or files.
// Exit codes: 0 success, 1 usage/config error, 2 runtime/divergence,
// 3 gradcheck failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "omuda/ablation.hpp"
#include "omuda/common.hpp"
#include "omuda/config.hpp"
#include "omuda/gradcheck.hpp"
#include "omuda/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using omuda::config::CliConfig;

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir;
    std::string data_dir;
    std::optional<std::uint64_t> seed;
    bool print_config = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "JSON config file");
    cmd->add_option("--set", opts.sets, "override a config key, e.g. --set cam.t_f=0.5")
        ->take_all();
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--data", opts.data_dir, "dataset directory");
    cmd->add_option("--seed", opts.seed, "override train.seed (and data.seed for generate)");
    cmd->add_flag("--print-config", opts.print_config,
                  "print the fully resolved config as JSON and exit");
}

CliConfig resolve_config(const CommonOpts& opts, bool generate_seed) {
    nlohmann::json tree = CliConfig::defaults().to_json();
    if (!opts.config_path.empty()) {
        std::ifstream f(opts.config_path);
        if (!f) throw omuda::ConfigError("cannot open config file: " + opts.config_path);
        nlohmann::json user;
        try {
            f >> user;
        } catch (const nlohmann::json::exception& e) {
            throw omuda::ConfigError(opts.config_path + ": invalid JSON: " + std::string(e.what()));
        }
        tree = omuda::config::merge_config(tree, user);
    }
    for (const auto& s : opts.sets) omuda::config::apply_set(tree, s);
    if (opts.seed.has_value()) {
        omuda::config::apply_set(tree, "train.seed=" + std::to_string(*opts.seed));
        if (generate_seed) {
            omuda::config::apply_set(tree, "data.seed=" + std::to_string(*opts.seed));
        }
    }
    auto cfg = CliConfig::from_json(tree);
    cfg.validate();
    return cfg;
}

bool maybe_print_config(const CommonOpts& opts, const CliConfig& cfg) {
    if (!opts.print_config) return false;
    std::cout << cfg.to_json().dump(2) << "\n";
    return true;
}

int cmd_generate(const CommonOpts& opts) {
    auto cfg = resolve_config(opts, true);
    if (maybe_print_config(opts, cfg)) return 0;
    if (opts.out_dir.empty()) throw omuda::ConfigError("generate: --out is required");

    using omuda::Domain;
    using omuda::datagen::Dataset;
    const auto& scene = cfg.scene;
    const std::uint64_t seed = cfg.data.seed;

    auto make = [&](Domain domain, int n, std::uint64_t stream) {
        Dataset ds;
        ds.config = scene;
        ds.domain = domain;
        ds.seed = seed + stream;
        ds.images = omuda::datagen::generate_dataset(scene, domain, n, seed + stream);
        return ds;
    };

    omuda::datagen::write_dataset((fs::path(opts.out_dir) / "source").string(),
                                  make(Domain::Source, cfg.data.n_source, 0));
    omuda::datagen::write_dataset((fs::path(opts.out_dir) / "target").string(),
                                  make(Domain::Target, cfg.data.n_target, 1'000'000));
    omuda::datagen::write_dataset((fs::path(opts.out_dir) / "target_eval").string(),
                                  make(Domain::Target, cfg.data.n_target_eval, 2'000'000));

    // Mixed-domain auxiliary set for extractor pretraining: even indices
    // source-style, odd indices target-style, labels retained.
    Dataset aux;
    aux.config = scene;
    aux.domain = Domain::Source;
    aux.seed = seed + 3'000'000;
    const auto src_half = omuda::datagen::generate_dataset(scene, Domain::Source,
                                                           (cfg.data.n_aux + 1) / 2,
                                                           seed + 3'000'000);
    const auto tgt_half = omuda::datagen::generate_dataset(scene, Domain::Target,
                                                           cfg.data.n_aux / 2, seed + 4'000'000);
    for (int i = 0; i < cfg.data.n_aux; ++i) {
        if (i % 2 == 0) {
            aux.images.push_back(src_half[i / 2]);
        } else {
            aux.images.push_back(tgt_half[i / 2]);
        }
    }
    omuda::datagen::write_dataset((fs::path(opts.out_dir) / "aux").string(), aux);

    std::cerr << "wrote datasets to " << opts.out_dir << " (source " << cfg.data.n_source
              << ", target " << cfg.data.n_target << ", target_eval " << cfg.data.n_target_eval
              << ", aux " << cfg.data.n_aux << ")\n";
    return 0;
}

int cmd_train(const CommonOpts& opts) {
    auto cfg = resolve_config(opts, false);
    if (maybe_print_config(opts, cfg)) return 0;
    if (opts.data_dir.empty()) throw omuda::ConfigError("train: --data is required");
    if (opts.out_dir.empty()) throw omuda::ConfigError("train: --out is required");

    auto data = omuda::trainer::load_datasets(opts.data_dir);
    auto result = omuda::trainer::run_training(cfg.train, data, opts.out_dir);

    nlohmann::json summary = {{"final_miou", result.final_miou},
                              {"best_miou", result.best_miou},
                              {"best_iter", result.best_iter},
                              {"iterations", cfg.train.iterations}};
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_evaluate(const std::string& checkpoint, const CommonOpts& opts) {
    if (opts.print_config) {
        auto cfg = resolve_config(opts, false);
        std::cout << cfg.to_json().dump(2) << "\n";
        return 0;
    }
    if (checkpoint.empty()) throw omuda::ConfigError("evaluate: --checkpoint is required");
    if (opts.data_dir.empty()) throw omuda::ConfigError("evaluate: --data is required");

    auto model = omuda::model::load_checkpoint(checkpoint);
    auto ds = omuda::datagen::read_dataset(
        (fs::path(opts.data_dir) / "target_eval").string());
    if (ds.config.k != model.k) {
        throw omuda::ConfigError("evaluate: checkpoint k=" + std::to_string(model.k) +
                                 " does not match dataset k=" + std::to_string(ds.config.k));
    }
    auto report = omuda::trainer::evaluate_model(model, ds.images);

    nlohmann::json per_class = nlohmann::json::object();
    for (int c = 0; c < ds.config.k; ++c) {
        if (report.present[c]) {
            per_class[ds.config.class_names[c]] = report.per_class[c];
        } else {
            per_class[ds.config.class_names[c]] = nullptr;
        }
    }
    nlohmann::json out = {{"miou", report.miou}, {"per_class_iou", per_class}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_ablate(const std::string& grid_path, std::uint64_t first_seed, int n_seeds,
               const CommonOpts& opts) {
    auto cfg = resolve_config(opts, false);
    if (maybe_print_config(opts, cfg)) return 0;
    if (opts.data_dir.empty()) throw omuda::ConfigError("ablate: --data is required");
    if (opts.out_dir.empty()) throw omuda::ConfigError("ablate: --out is required");

    omuda::evalx::AblationGrid grid;
    if (!grid_path.empty()) grid = omuda::evalx::load_grid(grid_path);

    auto data = omuda::trainer::load_datasets(opts.data_dir);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < n_seeds; ++i) seeds.push_back(first_seed + static_cast<std::uint64_t>(i));

    auto report = omuda::evalx::run_ablation(cfg, grid, data, seeds, opts.out_dir);
    std::cout << omuda::evalx::format_ablation_table(report, data.source.config.class_names);
    return 0;
}

int cmd_gradcheck(const CommonOpts& opts) {
    auto cfg = resolve_config(opts, false);
    if (maybe_print_config(opts, cfg)) return 0;

    const std::uint64_t seed = opts.seed.value_or(cfg.train.seed);
    auto suite = omuda::gradcheck::run_suite(cfg.train, seed);
    bool all_passed = true;
    for (const auto& entry : suite) {
        std::printf("%-8s max_rel_err=%.3e  params=%zu  %s", entry.name.c_str(),
                    entry.report.max_relative_error, entry.report.parameter_count,
                    entry.report.passed ? "PASS" : "FAIL");
        if (!entry.report.passed) {
            std::printf("  (worst: param %zu analytic %.6e numeric %.6e)",
                        entry.report.worst_index, entry.report.worst_analytic,
                        entry.report.worst_numeric);
        }
        std::printf("\n");
        all_passed = all_passed && entry.report.passed;
    }
    return all_passed ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked self-training engine for synthetic-scene domain adaptation"};
    app.require_subcommand(1);

    CommonOpts generate_opts, train_opts, eval_opts, ablate_opts, gradcheck_opts;
    std::string checkpoint, grid_path;
    std::uint64_t ablate_first_seed = 1;
    int ablate_n_seeds = 3;

    auto* generate = app.add_subcommand("generate", "write source/target/eval/aux datasets");
    add_common(generate, generate_opts);
    auto* train = app.add_subcommand("train", "run the full training loop");
    add_common(train, train_opts);
    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on target_eval");
    add_common(evaluate, eval_opts);
    evaluate->add_option("--checkpoint", checkpoint, "model checkpoint (.omck)");
    auto* ablate = app.add_subcommand("ablate", "run a grid of config deltas over seeds");
    add_common(ablate, ablate_opts);
    ablate->add_option("--grid", grid_path, "grid JSON file ({\"runs\": [...]}), empty = base only");
    ablate->add_option("--first-seed", ablate_first_seed, "first training seed");
    ablate->add_option("--seeds", ablate_n_seeds, "number of seeds");
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every loss path");
    add_common(gradcheck, gradcheck_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (generate->parsed()) return cmd_generate(generate_opts);
        if (train->parsed()) return cmd_train(train_opts);
        if (evaluate->parsed()) return cmd_evaluate(checkpoint, eval_opts);
        if (ablate->parsed()) return cmd_ablate(grid_path, ablate_first_seed, ablate_n_seeds, ablate_opts);
        if (gradcheck->parsed()) return cmd_gradcheck(gradcheck_opts);
    } catch (const omuda::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "argument error: " << e.what() << "\n";
        return 1;
    } catch (const omuda::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
