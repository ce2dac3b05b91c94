#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace {

namespace fs = std::filesystem;

const std::string kCli = OMUDA_CLI_PATH;

struct RunResult {
    int exit_code;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

RunResult run(const std::string& args, const fs::path& dir) {
    const auto out_path = dir / "stdout.txt";
    const auto err_path = dir / "stderr.txt";
    const std::string cmd =
        kCli + " " + args + " > " + out_path.string() + " 2> " + err_path.string();
    const int status = std::system(cmd.c_str());
    RunResult res;
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    res.out = slurp(out_path);
    res.err = slurp(err_path);
    return res;
}

fs::path make_workspace(const std::string& tag) {
    auto dir = fs::temp_directory_path() / ("omuda_cli_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// A configuration small enough for CLI smoke tests.
void write_tiny_config(const fs::path& path) {
    nlohmann::json cfg = {
        {"scene", {{"h", 32}, {"w", 32}}},
        {"data", {{"n_source", 10}, {"n_target", 10}, {"n_target_eval", 4}, {"n_aux", 6}}},
        {"train", {{"iterations", 8}, {"eval_interval", 4}, {"workers", 2}}},
        {"fdm", {{"pretrain_iterations", 20}}},
        {"optim", {{"warmup", 4}}},
    };
    std::ofstream f(path);
    f << cfg.dump(2);
}

}  // namespace

TEST_CASE("generate, train, evaluate pipeline") {
    auto dir = make_workspace("pipeline");
    write_tiny_config(dir / "cfg.json");

    auto gen = run("generate --config " + (dir / "cfg.json").string() + " --out " +
                       (dir / "data").string(),
                   dir);
    REQUIRE(gen.exit_code == 0);
    CHECK(fs::exists(dir / "data" / "source" / "images.bin"));
    CHECK(fs::exists(dir / "data" / "target" / "meta.json"));
    CHECK(fs::exists(dir / "data" / "target_eval" / "images.bin"));
    CHECK(fs::exists(dir / "data" / "aux" / "images.bin"));

    auto train = run("train --config " + (dir / "cfg.json").string() + " --data " +
                         (dir / "data").string() + " --out " + (dir / "run").string(),
                     dir);
    REQUIRE(train.exit_code == 0);
    auto summary = nlohmann::json::parse(train.out);
    const double miou = summary.at("final_miou").get<double>();
    CHECK(miou > 0.0);
    CHECK(miou <= 1.0);
    CHECK(fs::exists(dir / "run" / "train_log.csv"));
    CHECK(fs::exists(dir / "run" / "events.jsonl"));

    auto eval = run("evaluate --checkpoint " + (dir / "run" / "final.omck").string() +
                        " --data " + (dir / "data").string(),
                    dir);
    REQUIRE(eval.exit_code == 0);
    auto report = nlohmann::json::parse(eval.out);
    CHECK(report.at("miou").get<double>() > 0.0);
    CHECK(report.at("per_class_iou").is_object());

    fs::remove_all(dir);
}

TEST_CASE("invalid --set value exits 1 naming the key") {
    auto dir = make_workspace("badset");
    auto res = run("train --set cam.t_f=0 --data /nonexistent --out " + (dir / "o").string(),
                   dir);
    CHECK(res.exit_code == 1);
    CHECK(res.err.find("cam.t_f") != std::string::npos);

    auto res2 = run("train --set cam.nope=1 --data /nonexistent --out x", dir);
    CHECK(res2.exit_code == 1);
    CHECK(res2.err.find("cam.nope") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("print-config dumps the resolved configuration") {
    auto dir = make_workspace("printcfg");
    auto res = run("train --set train.lambda_kd=0.5 --print-config", dir);
    REQUIRE(res.exit_code == 0);
    auto cfg = nlohmann::json::parse(res.out);
    CHECK(cfg.at("train").at("lambda_kd").get<double>() == 0.5);
    CHECK(cfg.at("cam").contains("p_fg_branch"));
    CHECK(cfg.at("cdm").contains("mode"));
    fs::remove_all(dir);
}

TEST_CASE("identical invocations produce bitwise identical outputs") {
    auto dir = make_workspace("determinism");
    write_tiny_config(dir / "cfg.json");
    REQUIRE(run("generate --config " + (dir / "cfg.json").string() + " --out " +
                    (dir / "data").string(),
                dir)
                .exit_code == 0);

    for (const char* run_name : {"a", "b"}) {
        auto res = run("train --config " + (dir / "cfg.json").string() + " --data " +
                           (dir / "data").string() + " --out " + (dir / run_name).string() +
                           " --seed 5",
                       dir);
        REQUIRE(res.exit_code == 0);
    }
    CHECK(slurp(dir / "a" / "train_log.csv") == slurp(dir / "b" / "train_log.csv"));
    CHECK(slurp(dir / "a" / "final.omck") == slurp(dir / "b" / "final.omck"));
    CHECK(slurp(dir / "a" / "best.omck") == slurp(dir / "b" / "best.omck"));
    CHECK(slurp(dir / "a" / "events.jsonl") == slurp(dir / "b" / "events.jsonl"));
    fs::remove_all(dir);
}

TEST_CASE("gradcheck subcommand passes on the default seed") {
    auto dir = make_workspace("gradcheck");
    auto res = run("gradcheck", dir);
    CHECK(res.exit_code == 0);
    CHECK(res.out.find("L_Total") != std::string::npos);
    CHECK(res.out.find("FAIL") == std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("ablate smoke: empty grid reports base only, a delta adds a row") {
    auto dir = make_workspace("ablate");
    write_tiny_config(dir / "cfg.json");
    REQUIRE(run("generate --config " + (dir / "cfg.json").string() + " --out " +
                    (dir / "data").string(),
                dir)
                .exit_code == 0);

    auto base_only = run("ablate --config " + (dir / "cfg.json").string() + " --data " +
                             (dir / "data").string() + " --out " + (dir / "ab1").string() +
                             " --seeds 1",
                         dir);
    REQUIRE(base_only.exit_code == 0);
    auto rep = nlohmann::json::parse(slurp(dir / "ab1" / "ablation.json"));
    REQUIRE(rep.at("variants").size() == 1);
    CHECK(rep.at("variants")[0].at("name") == "base");

    nlohmann::json grid = {{"runs", {{{"name", "cdm_off"}, {"set", {{"cdm.mode", "off"}}}}}}};
    {
        std::ofstream g(dir / "grid.json");
        g << grid.dump();
    }
    auto two = run("ablate --config " + (dir / "cfg.json").string() + " --grid " +
                       (dir / "grid.json").string() + " --data " + (dir / "data").string() +
                       " --out " + (dir / "ab2").string() + " --seeds 1",
                   dir);
    REQUIRE(two.exit_code == 0);
    auto rep2 = nlohmann::json::parse(slurp(dir / "ab2" / "ablation.json"));
    REQUIRE(rep2.at("variants").size() == 2);
    CHECK(rep2.at("variants")[1].at("name") == "cdm_off");
    CHECK(rep2.at("variants")[1].at("delta").at("cdm.mode") == "off");
    CHECK(fs::exists(dir / "ab2" / "ablation.txt"));
    fs::remove_all(dir);
}
