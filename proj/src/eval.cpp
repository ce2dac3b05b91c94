#include "omuda/eval.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "omuda/common.hpp"

namespace omuda::evalx {

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
}

void accumulate(ConfusionMatrix& cm, std::span<const std::uint8_t> pred,
                std::span<const std::uint8_t> truth) {
    if (pred.size() != truth.size()) {
        throw std::invalid_argument("accumulate: pred/truth size mismatch");
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (truth[i] == 255) continue;
        if (truth[i] >= cm.k) {
            throw DataError("accumulate: truth label " + std::to_string(truth[i]) +
                            " out of range for k=" + std::to_string(cm.k));
        }
        if (pred[i] >= cm.k) {
            throw DataError("accumulate: predicted label " + std::to_string(pred[i]) +
                            " out of range for k=" + std::to_string(cm.k));
        }
        cm.counts[static_cast<std::size_t>(truth[i]) * cm.k + pred[i]]++;
    }
}

IouReport iou(const ConfusionMatrix& cm) {
    IouReport rep;
    rep.per_class.assign(cm.k, std::numeric_limits<double>::quiet_NaN());
    rep.present.assign(cm.k, false);
    double sum = 0.0;
    for (int c = 0; c < cm.k; ++c) {
        std::uint64_t row = 0, col = 0;
        for (int j = 0; j < cm.k; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        const std::uint64_t diag = cm.at(c, c);
        const std::uint64_t denom = row + col - diag;
        if (denom == 0) continue;  // absent from truth and prediction
        rep.per_class[c] = static_cast<double>(diag) / static_cast<double>(denom);
        rep.present[c] = true;
        rep.present_count++;
        sum += rep.per_class[c];
    }
    rep.miou = rep.present_count > 0 ? sum / rep.present_count : 0.0;
    return rep;
}

}  // namespace omuda::evalx
