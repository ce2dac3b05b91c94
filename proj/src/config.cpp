#include "omuda/config.hpp"

#include <fstream>

#include "omuda/common.hpp"

namespace omuda::config {

namespace {

std::string mask_strategy_name(trainer::MaskStrategy m) {
    switch (m) {
        case trainer::MaskStrategy::Cam: return "cam";
        case trainer::MaskStrategy::Random: return "random";
        case trainer::MaskStrategy::Grid: return "grid";
        case trainer::MaskStrategy::None: return "none";
    }
    return "cam";
}

trainer::MaskStrategy mask_strategy_from(const std::string& s) {
    if (s == "cam") return trainer::MaskStrategy::Cam;
    if (s == "random") return trainer::MaskStrategy::Random;
    if (s == "grid") return trainer::MaskStrategy::Grid;
    if (s == "none") return trainer::MaskStrategy::None;
    throw ConfigError("cam.mask_strategy must be one of cam|random|grid|none, got '" + s + "'");
}

std::string sampling_name(trainer::SamplingStrategy s) {
    switch (s) {
        case trainer::SamplingStrategy::Cam: return "cam";
        case trainer::SamplingStrategy::Rcs: return "rcs";
        case trainer::SamplingStrategy::Uniform: return "uniform";
    }
    return "cam";
}

trainer::SamplingStrategy sampling_from(const std::string& s) {
    if (s == "cam") return trainer::SamplingStrategy::Cam;
    if (s == "rcs") return trainer::SamplingStrategy::Rcs;
    if (s == "uniform") return trainer::SamplingStrategy::Uniform;
    throw ConfigError("cam.sampling must be one of cam|rcs|uniform, got '" + s + "'");
}

std::string cdm_mode_name(trainer::CdmConfigMode m) {
    switch (m) {
        case trainer::CdmConfigMode::Paper: return "paper";
        case trainer::CdmConfigMode::Inverted: return "inverted";
        case trainer::CdmConfigMode::Off: return "off";
    }
    return "paper";
}

trainer::CdmConfigMode cdm_mode_from(const std::string& s) {
    if (s == "paper") return trainer::CdmConfigMode::Paper;
    if (s == "inverted") return trainer::CdmConfigMode::Inverted;
    if (s == "off") return trainer::CdmConfigMode::Off;
    throw ConfigError("cdm.mode must be one of paper|inverted|off, got '" + s + "'");
}

std::string norm_name(fdm::DistanceNormalization n) {
    return n == fdm::DistanceNormalization::Mean ? "mean" : "sum";
}

fdm::DistanceNormalization norm_from(const std::string& s) {
    if (s == "mean") return fdm::DistanceNormalization::Mean;
    if (s == "sum") return fdm::DistanceNormalization::Sum;
    throw ConfigError("fdm.normalization must be one of mean|sum, got '" + s + "'");
}

std::string extractor_name(model::ExtractorMode m) {
    return m == model::ExtractorMode::Auxiliary ? "auxiliary" : "fixed-random";
}

model::ExtractorMode extractor_from(const std::string& s) {
    if (s == "auxiliary") return model::ExtractorMode::Auxiliary;
    if (s == "fixed-random") return model::ExtractorMode::FixedRandom;
    throw ConfigError("fdm.extractor must be one of auxiliary|fixed-random, got '" + s + "'");
}

}  // namespace

nlohmann::json CliConfig::to_json() const {
    return {
        {"scene",
         {{"k", scene.k},
          {"class_names", scene.class_names},
          {"background", scene.partition.background},
          {"foreground", scene.partition.foreground},
          {"h", scene.h},
          {"w", scene.w},
          {"rarity", scene.rarity},
          {"shift",
           {{"hue_shift", scene.shift.hue_shift},
            {"brightness_scale", scene.shift.brightness_scale},
            {"noise_sigma", scene.shift.noise_sigma},
            {"texture_seed_offset", scene.shift.texture_seed_offset}}}}},
        {"data",
         {{"seed", data.seed},
          {"n_source", data.n_source},
          {"n_target", data.n_target},
          {"n_target_eval", data.n_target_eval},
          {"n_aux", data.n_aux}}},
        {"train",
         {{"seed", train.seed},
          {"iterations", train.iterations},
          {"batch_size", train.batch_size},
          {"lambda_kd", train.lambda_kd},
          {"alpha", train.alpha},
          {"eval_interval", train.eval_interval},
          {"self_training", train.self_training},
          {"workers", train.workers}}},
        {"optim",
         {{"lr_encoder", train.optim.lr_encoder},
          {"lr_decoder", train.optim.lr_decoder},
          {"warmup", train.optim.warmup},
          {"weight_decay", train.optim.weight_decay},
          {"beta1", train.optim.beta1},
          {"beta2", train.optim.beta2},
          {"eps", train.optim.eps}}},
        {"model", {{"d_hid", train.d_hid}}},
        {"cam",
         {{"sampling", sampling_name(train.sampling)},
          {"t_b", train.t_b},
          {"t_f", train.t_f},
          {"p_fg_branch", train.p_fg_branch},
          {"n_min", train.n_min},
          {"mask_strategy", mask_strategy_name(train.mask_strategy)},
          {"mask_ratio", train.mask_ratio},
          {"block_fore", train.block_fore},
          {"block_back", train.block_back}}},
        {"fdm",
         {{"enabled", train.fdm_enabled},
          {"normalization", norm_name(train.d_norm)},
          {"n_min_fg", train.n_min_fg},
          {"extractor", extractor_name(train.extractor_mode)},
          {"pretrain_iterations", train.pretrain_iterations}}},
        {"cdm",
         {{"mode", cdm_mode_name(train.cdm_mode)},
          {"decay", train.cdm_decay},
          {"beta_init", train.cdm_beta_init}}},
    };
}

CliConfig CliConfig::defaults() { return CliConfig{}; }

namespace {

template <typename T>
T get(const nlohmann::json& j, const std::string& section, const std::string& key) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config key " + section + "." + key + ": " + e.what());
    }
}

}  // namespace

CliConfig CliConfig::from_json(const nlohmann::json& j) {
    CliConfig c;
    const auto& sc = j.at("scene");
    c.scene.k = get<int>(sc, "scene", "k");
    c.scene.class_names = get<std::vector<std::string>>(sc, "scene", "class_names");
    c.scene.partition.background = get<std::vector<int>>(sc, "scene", "background");
    c.scene.partition.foreground = get<std::vector<int>>(sc, "scene", "foreground");
    c.scene.h = get<int>(sc, "scene", "h");
    c.scene.w = get<int>(sc, "scene", "w");
    c.scene.rarity = get<std::vector<double>>(sc, "scene", "rarity");
    const auto& sh = sc.at("shift");
    c.scene.shift.hue_shift = get<double>(sh, "scene.shift", "hue_shift");
    c.scene.shift.brightness_scale = get<double>(sh, "scene.shift", "brightness_scale");
    c.scene.shift.noise_sigma = get<double>(sh, "scene.shift", "noise_sigma");
    c.scene.shift.texture_seed_offset = get<std::int64_t>(sh, "scene.shift", "texture_seed_offset");

    const auto& da = j.at("data");
    c.data.seed = get<std::uint64_t>(da, "data", "seed");
    c.data.n_source = get<int>(da, "data", "n_source");
    c.data.n_target = get<int>(da, "data", "n_target");
    c.data.n_target_eval = get<int>(da, "data", "n_target_eval");
    c.data.n_aux = get<int>(da, "data", "n_aux");

    const auto& tr = j.at("train");
    c.train.seed = get<std::uint64_t>(tr, "train", "seed");
    c.train.iterations = get<int>(tr, "train", "iterations");
    c.train.batch_size = get<int>(tr, "train", "batch_size");
    c.train.lambda_kd = get<double>(tr, "train", "lambda_kd");
    c.train.alpha = get<double>(tr, "train", "alpha");
    c.train.eval_interval = get<int>(tr, "train", "eval_interval");
    c.train.self_training = get<bool>(tr, "train", "self_training");
    c.train.workers = get<int>(tr, "train", "workers");

    const auto& op = j.at("optim");
    c.train.optim.lr_encoder = get<double>(op, "optim", "lr_encoder");
    c.train.optim.lr_decoder = get<double>(op, "optim", "lr_decoder");
    c.train.optim.warmup = get<int>(op, "optim", "warmup");
    c.train.optim.weight_decay = get<double>(op, "optim", "weight_decay");
    c.train.optim.beta1 = get<double>(op, "optim", "beta1");
    c.train.optim.beta2 = get<double>(op, "optim", "beta2");
    c.train.optim.eps = get<double>(op, "optim", "eps");

    c.train.d_hid = get<int>(j.at("model"), "model", "d_hid");

    const auto& ca = j.at("cam");
    c.train.sampling = sampling_from(get<std::string>(ca, "cam", "sampling"));
    c.train.t_b = get<double>(ca, "cam", "t_b");
    c.train.t_f = get<double>(ca, "cam", "t_f");
    c.train.p_fg_branch = get<double>(ca, "cam", "p_fg_branch");
    c.train.n_min = get<int>(ca, "cam", "n_min");
    c.train.mask_strategy = mask_strategy_from(get<std::string>(ca, "cam", "mask_strategy"));
    c.train.mask_ratio = get<double>(ca, "cam", "mask_ratio");
    c.train.block_fore = get<int>(ca, "cam", "block_fore");
    c.train.block_back = get<int>(ca, "cam", "block_back");

    const auto& fd = j.at("fdm");
    c.train.fdm_enabled = get<bool>(fd, "fdm", "enabled");
    c.train.d_norm = norm_from(get<std::string>(fd, "fdm", "normalization"));
    c.train.n_min_fg = get<int>(fd, "fdm", "n_min_fg");
    c.train.extractor_mode = extractor_from(get<std::string>(fd, "fdm", "extractor"));
    c.train.pretrain_iterations = get<int>(fd, "fdm", "pretrain_iterations");

    const auto& cd = j.at("cdm");
    c.train.cdm_mode = cdm_mode_from(get<std::string>(cd, "cdm", "mode"));
    c.train.cdm_decay = get<double>(cd, "cdm", "decay");
    c.train.cdm_beta_init = get<double>(cd, "cdm", "beta_init");
    return c;
}

CliConfig CliConfig::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    nlohmann::json user;
    try {
        f >> user;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": invalid JSON: " + e.what());
    }
    const auto merged = merge_config(CliConfig::defaults().to_json(), user);
    return CliConfig::from_json(merged);
}

void CliConfig::validate() const {
    scene.validate();
    if (data.n_source < 1) throw ConfigError("data.n_source must be >= 1");
    if (data.n_target < 1) throw ConfigError("data.n_target must be >= 1");
    if (data.n_target_eval < 1) throw ConfigError("data.n_target_eval must be >= 1");
    if (data.n_aux < 0) throw ConfigError("data.n_aux must be >= 0");
    train.validate();
}

nlohmann::json merge_config(const nlohmann::json& defaults, const nlohmann::json& user,
                            const std::string& prefix) {
    if (!user.is_object()) {
        throw ConfigError("config node " + (prefix.empty() ? "<root>" : prefix) +
                          " must be an object");
    }
    nlohmann::json out = defaults;
    for (const auto& [key, value] : user.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!defaults.contains(key)) {
            throw ConfigError("unknown config key: " + path);
        }
        if (defaults.at(key).is_object()) {
            out[key] = merge_config(defaults.at(key), value, path);
        } else {
            out[key] = value;
        }
    }
    return out;
}

void apply_set(nlohmann::json& tree, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("--set expects key=value, got '" + assignment + "'");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        if (dot == std::string::npos) {
            parts.push_back(path.substr(start));
            break;
        }
        parts.push_back(path.substr(start, dot - start));
        start = dot + 1;
    }

    nlohmann::json* node = &tree;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) {
            throw ConfigError("unknown config key: " + path);
        }
        node = &(*node)[parts[i]];
    }
    if (!node->contains(parts.back())) {
        throw ConfigError("unknown config key: " + path);
    }

    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;  // plain string
    (*node)[parts.back()] = value;
}

}  // namespace omuda::config
