#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "omuda/datagen.hpp"
#include "omuda/trainer.hpp"

namespace omuda::config {

struct DataConfig {
    std::uint64_t seed = 7;
    int n_source = 200;
    int n_target = 200;
    int n_target_eval = 64;
    int n_aux = 64;
};

// Full resolved configuration: scene + data counts + training settings.
// Loaded from a JSON file, overridable with dotted --set paths; unknown keys
// are rejected with the offending path.
struct CliConfig {
    SceneConfig scene = SceneConfig::default_config();
    DataConfig data;
    trainer::TrainConfig train;

    void validate() const;
    nlohmann::json to_json() const;

    static CliConfig defaults();
    static CliConfig from_json(const nlohmann::json& j);
    static CliConfig load_file(const std::string& path);
};

// Applies "a.b.c=value" onto a JSON tree; value is parsed as JSON when
// possible, otherwise taken as a string. The path must already exist in the
// defaults tree.
void apply_set(nlohmann::json& tree, const std::string& assignment);

// Recursively verifies `user` only contains keys present in `defaults`
// (same types), then merges user over defaults.
nlohmann::json merge_config(const nlohmann::json& defaults, const nlohmann::json& user,
                            const std::string& prefix = "");

}  // namespace omuda::config
