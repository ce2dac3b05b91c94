#pragma once

#include <span>
#include <vector>

#include "omuda/datagen.hpp"
#include "omuda/rng.hpp"

namespace omuda::cam {

// Per-class pixel frequencies over a labeled dataset (ignore pixels are
// excluded from both numerator and denominator).
struct ClassFrequencies {
    std::vector<double> f;
};

ClassFrequencies compute_frequencies(std::span<const LabeledImage> dataset, int k);

// Temperature-softmax sampling probabilities, computed separately per
// branch: P(c) = exp((1 - f_c)/T) / sum over the branch.
struct SamplingDistribution {
    std::vector<int> fore_classes;   // class ids, aligned with p_fore
    std::vector<int> back_classes;   // class ids, aligned with p_back
    std::vector<double> p_fore;
    std::vector<double> p_back;
    double p_fg_branch = 0.5;
};

SamplingDistribution sampling_distribution(const ClassFrequencies& freq,
                                           const ClassPartition& partition, double t_b,
                                           double t_f, double p_fg_branch = 0.5);

// Single-branch variant over all classes jointly with one temperature
// (rare-class sampling baseline for the ablation grid).
SamplingDistribution rcs_distribution(const ClassFrequencies& freq, double temperature);

// class id -> images containing at least n_min pixels of that class.
struct ClassIndex {
    std::vector<std::vector<int>> images_by_class;
    int n_min = 8;
};

ClassIndex build_class_index(std::span<const LabeledImage> dataset, int k, int n_min);

// Draws branch, then class, then a uniform image among those containing the
// class. Throws std::out_of_range (naming the class) if no image qualifies.
int sample_source_image(const SamplingDistribution& dist, const ClassIndex& index, Rng& rng);

// Binary keep-mask constant on aligned block x block tiles (the last row and
// column of tiles may be partial).
struct BlockMask {
    int h = 0;
    int w = 0;
    int block = 1;
    std::vector<std::uint8_t> keep;  // h*w, 1 = keep, 0 = masked

    double masked_fraction() const;
    static BlockMask ones(int h, int w);
};

// Each tile is masked independently with probability `ratio`.
BlockMask make_block_mask(int h, int w, int block, double ratio, Rng& rng);

// Fixed alternating tiles (checkerboard); masks half the tiles.
BlockMask make_grid_mask(int h, int w, int block);

// Per-pixel rule: pixels whose pseudo-label is in the background set take
// mask_back, all others take mask_fore; masked-out pixels become 0.
std::vector<std::uint8_t> combine_masked_image(const LabeledImage& x_t,
                                               std::span<const std::uint8_t> pseudo,
                                               const ClassPartition& partition,
                                               const BlockMask& mask_back,
                                               const BlockMask& mask_fore);

}  // namespace omuda::cam
