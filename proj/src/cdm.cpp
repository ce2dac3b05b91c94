#include "omuda/cdm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace omuda::cdm {

std::vector<std::uint8_t> argmax_labels(const DenseArray& logits) {
    const std::size_t k = logits.shape[1];
    const std::size_t p_count = logits.shape[0];
    std::vector<std::uint8_t> out(p_count);
    for (std::size_t p = 0; p < p_count; ++p) {
        const double* row = &logits.data[p * k];
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
            if (row[c] > row[best]) best = c;  // strict: ties keep the lowest index
        }
        out[p] = static_cast<std::uint8_t>(best);
    }
    return out;
}

PseudoLabelMap pseudo_labels(const model::SegModel& teacher, const DenseArray& feats, int h,
                             int w) {
    auto fr = model::forward(teacher, feats);
    PseudoLabelMap map;
    map.h = h;
    map.w = w;
    map.labels = argmax_labels(fr.logits);
    return map;
}

PseudoLabelMap pseudo_labels(const model::SegModel& teacher, const LabeledImage& x_t) {
    return pseudo_labels(teacher, model::featurize(x_t), x_t.h, x_t.w);
}

ReliabilityState ReliabilityState::init(int k, double decay, double beta_init) {
    if (!(decay >= 0.0 && decay < 1.0)) {
        throw std::invalid_argument("ReliabilityState: decay must be in [0, 1)");
    }
    if (!(beta_init >= 0.0 && beta_init <= 1.0)) {
        throw std::invalid_argument("ReliabilityState: beta_init must be in [0, 1]");
    }
    ReliabilityState s;
    s.beta.assign(k, beta_init);
    s.agree_counts.assign(k, 0.0);
    s.seen_counts.assign(k, 0.0);
    s.decay = decay;
    return s;
}

std::uint64_t ReliabilityState::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double b : beta) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(b));
        std::memcpy(&bits, &b, sizeof(bits));
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

void update_reliability(ReliabilityState& state, std::span<const std::uint8_t> student_pred,
                        std::span<const std::uint8_t> pseudo) {
    if (student_pred.size() != pseudo.size()) {
        throw std::invalid_argument("update_reliability: shape mismatch");
    }
    const std::size_t k = state.beta.size();
    std::vector<std::size_t> m(k, 0), agree(k, 0);
    for (std::size_t i = 0; i < pseudo.size(); ++i) {
        if (pseudo[i] >= k) continue;  // ignore pixels carry no pseudo-class
        m[pseudo[i]]++;
        if (student_pred[i] == pseudo[i]) agree[pseudo[i]]++;
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (m[c] == 0) continue;
        const double r = 1.0 - static_cast<double>(agree[c]) / static_cast<double>(m[c]);
        state.beta[c] = state.decay * state.beta[c] + (1.0 - state.decay) * r;
        state.agree_counts[c] += static_cast<double>(agree[c]);
        state.seen_counts[c] += static_cast<double>(m[c]);
    }
}

WeightedLossResult weighted_class_ce(const DenseArray& probs,
                                     std::span<const std::uint8_t> labels,
                                     std::span<const double> class_weights) {
    if (probs.shape.size() != 2 || probs.shape[0] != labels.size()) {
        throw std::invalid_argument("weighted_class_ce: probs must be {P, K} with P labels");
    }
    const std::size_t k = probs.shape[1];
    if (class_weights.size() != k) {
        throw std::invalid_argument("weighted_class_ce: weight vector must have K entries");
    }
    constexpr double clamp = 1e-12;

    std::vector<std::size_t> n(k, 0);
    for (std::size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] == 255) continue;
        if (labels[p] >= k) throw std::invalid_argument("weighted_class_ce: label out of range");
        n[labels[p]]++;
    }

    WeightedLossResult res;
    res.grad_logits = DenseArray(probs.shape);
    for (std::size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] == 255) continue;
        const std::size_t y = labels[p];
        const double wc = class_weights[y] / static_cast<double>(n[y]);
        if (wc == 0.0) continue;
        const double* row = &probs.data[p * k];
        res.loss += wc * -std::log(std::max(row[y], clamp));
        if (row[y] >= clamp) {
            double* g = &res.grad_logits.data[p * k];
            for (std::size_t c = 0; c < k; ++c) g[c] = wc * row[c];
            g[y] -= wc;
        }
    }
    return res;
}

WeightedLossResult class_normalized_loss(const DenseArray& probs,
                                         std::span<const std::uint8_t> labels) {
    std::vector<double> ones(probs.shape[1], 1.0);
    return weighted_class_ce(probs, labels, ones);
}

WeightedLossResult weighted_loss(const DenseArray& probs, std::span<const std::uint8_t> pseudo,
                                 const ReliabilityState& state, WeightingMode mode) {
    std::vector<double> weights(state.beta.size());
    for (std::size_t c = 0; c < weights.size(); ++c) {
        weights[c] = mode == WeightingMode::Paper ? state.beta[c] : 1.0 - state.beta[c];
    }
    return weighted_class_ce(probs, pseudo, weights);
}

}  // namespace omuda::cdm
