#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace omuda::evalx {

// K x K counts, rows = ground truth, columns = prediction. Ignore pixels
// (truth 255) are skipped.
struct ConfusionMatrix {
    int k = 0;
    std::vector<std::uint64_t> counts;  // k*k, row-major

    explicit ConfusionMatrix(int k_) : k(k_), counts(static_cast<std::size_t>(k_) * k_, 0) {}

    std::uint64_t at(int truth, int pred) const {
        return counts[static_cast<std::size_t>(truth) * k + pred];
    }
    std::uint64_t total() const;
};

void accumulate(ConfusionMatrix& cm, std::span<const std::uint8_t> pred,
                std::span<const std::uint8_t> truth);

struct IouReport {
    std::vector<double> per_class;   // NaN for absent classes
    std::vector<bool> present;       // false when the IoU denominator is zero
    double miou = 0.0;               // mean over present classes only
    int present_count = 0;
};

IouReport iou(const ConfusionMatrix& cm);

}  // namespace omuda::evalx
