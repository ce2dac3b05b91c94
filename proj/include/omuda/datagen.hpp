#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "omuda/rng.hpp"

namespace omuda {

constexpr std::uint8_t kIgnoreLabel = 255;

// Disjoint foreground/background class index sets covering 0..K-1.
struct ClassPartition {
    std::vector<int> foreground;
    std::vector<int> background;

    bool is_foreground(int cls) const;
    void validate(int k) const;  // throws ConfigError
};

enum class Domain { Source, Target };

std::string domain_name(Domain d);
Domain domain_from_name(const std::string& name);

// Appearance-only perturbation applied to target-domain images. Labels are
// never affected.
struct DomainShiftParams {
    double hue_shift = 60.0;        // degrees of hue rotation
    double brightness_scale = 0.75; // multiplicative, > 0
    double noise_sigma = 10.0;      // additive Gaussian noise in 8-bit units
    std::int64_t texture_seed_offset = 1;
};

struct SceneConfig {
    int k = 8;
    std::vector<std::string> class_names;
    ClassPartition partition;
    int h = 64;
    int w = 64;
    DomainShiftParams shift;
    std::vector<double> rarity;  // per-class target pixel frequency weights

    void validate() const;  // throws ConfigError
    static SceneConfig default_config();
};

// RGB pixel grid plus per-pixel class labels (255 = ignore).
struct LabeledImage {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> rgb;     // h*w*3, row-major
    std::vector<std::uint8_t> labels;  // h*w

    std::size_t pixel_count() const { return static_cast<std::size_t>(h) * w; }
    bool operator==(const LabeledImage&) const = default;
};

namespace datagen {

// Procedural street-scene image: background bands/blocks plus small
// foreground shapes. Deterministic in (config, domain, seed); source and
// target share the label plane for equal seeds.
LabeledImage generate_scene(const SceneConfig& config, Domain domain, std::uint64_t seed);

// n scenes with per-image streams derived from (seed, index).
std::vector<LabeledImage> generate_dataset(const SceneConfig& config, Domain domain,
                                           std::size_t n, std::uint64_t seed);

struct Dataset {
    SceneConfig config;
    Domain domain = Domain::Source;
    std::uint64_t seed = 0;
    std::vector<LabeledImage> images;
};

// A view of target images with the labels stripped (all-ignore); the
// training loop's target pathway only ever sees this.
std::vector<LabeledImage> target_view(std::span<const LabeledImage> images);

// Directory layout: meta.json + images.bin ("OMDS" magic, little-endian).
void write_dataset(const std::string& dir, const Dataset& dataset);
Dataset read_dataset(const std::string& dir);

}  // namespace datagen
}  // namespace omuda
