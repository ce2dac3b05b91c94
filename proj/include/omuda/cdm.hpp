#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "omuda/model.hpp"
#include "omuda/numerics.hpp"

namespace omuda::cdm {

// Per-pixel argmax of the teacher on the unmasked target image; ties go to
// the lowest class index.
struct PseudoLabelMap {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> labels;
};

PseudoLabelMap pseudo_labels(const model::SegModel& teacher, const LabeledImage& x_t);
// Variant with precomputed features (the training loop caches featurize).
PseudoLabelMap pseudo_labels(const model::SegModel& teacher, const DenseArray& feats, int h, int w);

std::vector<std::uint8_t> argmax_labels(const DenseArray& logits);

enum class WeightingMode { Paper, Inverted };

// Running per-class student/teacher disagreement. beta stays in [0, 1] since
// every update is a convex combination.
struct ReliabilityState {
    std::vector<double> beta;
    std::vector<double> agree_counts;  // cumulative, for logging
    std::vector<double> seen_counts;
    double decay = 0.9;

    static ReliabilityState init(int k, double decay, double beta_init = 0.5);
    std::uint64_t hash() const;
};

// Per-class batch disagreement r_c = 1 - agree_c / m_c for classes with
// pseudo-pixels in the batch; beta_c <- decay * beta_c + (1-decay) * r_c.
void update_reliability(ReliabilityState& state, std::span<const std::uint8_t> student_pred,
                        std::span<const std::uint8_t> pseudo);

struct WeightedLossResult {
    double loss = 0.0;
    DenseArray grad_logits;
};

// sum_c (w_c / n_c) * sum_{i: labels_i = c} -log probs[i][c], i.e. a
// weighted sum of per-class mean CE. Classes absent from the batch
// contribute nothing. Probabilities clamped at 1e-12 before the log.
WeightedLossResult weighted_class_ce(const DenseArray& probs,
                                     std::span<const std::uint8_t> labels,
                                     std::span<const double> class_weights);

// weighted_class_ce with unit weights.
WeightedLossResult class_normalized_loss(const DenseArray& probs,
                                         std::span<const std::uint8_t> labels);

// Weights from the reliability state: beta_c in Paper mode, 1 - beta_c in
// Inverted mode.
WeightedLossResult weighted_loss(const DenseArray& probs, std::span<const std::uint8_t> pseudo,
                                 const ReliabilityState& state, WeightingMode mode);

}  // namespace omuda::cdm
