#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "omuda/datagen.hpp"
#include "omuda/numerics.hpp"
#include "omuda/rng.hpp"

namespace omuda::model {

constexpr int kFeatureDim = 9;

// Hand-crafted per-pixel features in [0, 1]:
// (r, g, b, mean3x3 r, mean3x3 g, mean3x3 b, std3x3 of gray, row/H, col/W).
// Border pixels use clamped 3x3 windows. Output shape {H*W, 9}.
DenseArray featurize(const LabeledImage& image);
DenseArray featurize_rgb(int h, int w, std::span<const std::uint8_t> rgb);

// Two-layer per-pixel network: neck = relu(x W1 + b1), logits = neck W2 + b2.
// W1/b1 play the encoder role, W2/b2 the decoder role.
struct SegModel {
    int d_in = kFeatureDim;
    int d_hid = 32;
    int k = 8;
    DenseArray w1, b1, w2, b2;

    static SegModel init(int d_in, int d_hid, int k, Rng& rng);
    std::size_t parameter_count() const;
    std::vector<double> flatten() const;
    void unflatten(std::span<const double> flat);
    bool same_shape(const SegModel& other) const;
    bool operator==(const SegModel&) const = default;
};

// Parameter-shaped gradient (or moment) buffers.
struct ParamGrads {
    DenseArray w1, b1, w2, b2;

    static ParamGrads zeros_like(const SegModel& m);
    void accumulate(const ParamGrads& other);
    std::vector<double> flatten() const;
    bool all_finite() const;
};

struct ForwardResult {
    DenseArray neck;    // {P, d_hid}, post-ReLU
    DenseArray logits;  // {P, k}
};

ForwardResult forward(const SegModel& m, const DenseArray& feats);

// Exact gradients of the forward map. Either upstream may be empty (treated
// as zero). ReLU subgradient at 0 is 0; the mask is recovered from neck > 0.
ParamGrads backward(const SegModel& m, const DenseArray& feats, const DenseArray& neck,
                    const DenseArray& d_logits, const DenseArray& d_neck);

// teacher <- alpha * teacher + (1 - alpha) * student, all parameters.
void ema_update(SegModel& teacher, const SegModel& student, double alpha);

struct OptimizerSettings {
    double lr_encoder = 6e-4;
    double lr_decoder = 6e-3;
    int warmup = 100;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam moments plus step counter; decoupled weight decay, linear warmup.
struct OptimizerState {
    OptimizerSettings settings;
    ParamGrads m, v;
    std::uint64_t step = 0;

    static OptimizerState init(const SegModel& model, const OptimizerSettings& s);
    double lr_scale() const;  // min(1, (step+1)/warmup) for the upcoming step
};

void optimizer_step(OptimizerState& state, SegModel& model, const ParamGrads& grads);

enum class ExtractorMode { Auxiliary, FixedRandom };

// Frozen copy of a first layer used as the relational-distillation reference.
struct PretrainedExtractor {
    int d_in = kFeatureDim;
    int d_out = 32;
    DenseArray w1, b1;
    ExtractorMode provenance = ExtractorMode::FixedRandom;

    DenseArray forward(const DenseArray& feats) const;  // {P, d_out}
};

struct PretrainSettings {
    int iterations = 300;
    int batch_size = 3;
    OptimizerSettings optim;
};

// Auxiliary mode trains a fresh model with plain CE on the mixed-domain
// images and freezes layer 1; fixed-random freezes a seeded random layer 1.
PretrainedExtractor pretrain_extractor(std::span<const LabeledImage> aux_images, int k, int d_hid,
                                       ExtractorMode mode, const PretrainSettings& settings,
                                       std::uint64_t seed);

// Checkpoint file: "OMCK" magic, u32 version, u32 d_in, u32 d_hid, u32 k,
// then W1, b1, W2, b2 as little-endian doubles.
void save_checkpoint(const std::string& path, const SegModel& model);
SegModel load_checkpoint(const std::string& path);

}  // namespace omuda::model
