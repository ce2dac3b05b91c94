#include "omuda/cam.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "omuda/common.hpp"
#include "omuda/numerics.hpp"

namespace omuda::cam {

ClassFrequencies compute_frequencies(std::span<const LabeledImage> dataset, int k) {
    if (dataset.empty()) throw DataError("compute_frequencies: empty dataset");
    std::vector<std::uint64_t> counts(k, 0);
    std::uint64_t total = 0;
    for (const auto& img : dataset) {
        for (std::uint8_t label : img.labels) {
            if (label == kIgnoreLabel) continue;
            if (label >= k) {
                throw DataError("compute_frequencies: label " + std::to_string(label) +
                                " out of range for k=" + std::to_string(k));
            }
            counts[label]++;
            total++;
        }
    }
    if (total == 0) throw DataError("compute_frequencies: dataset has no non-ignore pixels");
    ClassFrequencies freq;
    freq.f.resize(k);
    for (int c = 0; c < k; ++c) freq.f[c] = static_cast<double>(counts[c]) / total;
    return freq;
}

namespace {

std::vector<double> branch_softmax(const std::vector<double>& f, std::span<const int> classes,
                                   double temperature) {
    DenseArray logits({classes.size()});
    for (std::size_t i = 0; i < classes.size(); ++i) {
        logits[i] = (1.0 - f[classes[i]]) / temperature;
    }
    return num::softmax(logits, 0).data;
}

}  // namespace

SamplingDistribution sampling_distribution(const ClassFrequencies& freq,
                                           const ClassPartition& partition, double t_b,
                                           double t_f, double p_fg_branch) {
    if (!(t_b > 0.0)) throw std::invalid_argument("sampling_distribution: t_b must be > 0");
    if (!(t_f > 0.0)) throw std::invalid_argument("sampling_distribution: t_f must be > 0");
    if (!(p_fg_branch >= 0.0 && p_fg_branch <= 1.0)) {
        throw std::invalid_argument("sampling_distribution: p_fg_branch must be in [0, 1]");
    }
    SamplingDistribution dist;
    dist.fore_classes = partition.foreground;
    dist.back_classes = partition.background;
    dist.p_fore = branch_softmax(freq.f, dist.fore_classes, t_f);
    dist.p_back = branch_softmax(freq.f, dist.back_classes, t_b);
    dist.p_fg_branch = p_fg_branch;
    return dist;
}

SamplingDistribution rcs_distribution(const ClassFrequencies& freq, double temperature) {
    if (!(temperature > 0.0)) throw std::invalid_argument("rcs_distribution: temperature must be > 0");
    SamplingDistribution dist;
    dist.fore_classes.resize(freq.f.size());
    for (std::size_t c = 0; c < freq.f.size(); ++c) dist.fore_classes[c] = static_cast<int>(c);
    dist.p_fore = branch_softmax(freq.f, dist.fore_classes, temperature);
    dist.p_fg_branch = 1.0;  // single branch
    return dist;
}

ClassIndex build_class_index(std::span<const LabeledImage> dataset, int k, int n_min) {
    ClassIndex index;
    index.n_min = n_min;
    index.images_by_class.resize(k);
    std::vector<int> counts(k);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        std::fill(counts.begin(), counts.end(), 0);
        for (std::uint8_t label : dataset[i].labels) {
            if (label < k) counts[label]++;
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] >= n_min) index.images_by_class[c].push_back(static_cast<int>(i));
        }
    }
    return index;
}

int sample_source_image(const SamplingDistribution& dist, const ClassIndex& index, Rng& rng) {
    const bool fore = rng.bernoulli(dist.p_fg_branch);
    const auto& classes = fore ? dist.fore_classes : dist.back_classes;
    const auto& probs = fore ? dist.p_fore : dist.p_back;
    if (classes.empty()) {
        throw std::out_of_range("sample_source_image: drawn branch has no classes");
    }
    const int cls = classes[rng.weighted_choice(probs)];
    const auto& candidates = index.images_by_class.at(cls);
    if (candidates.empty()) {
        throw std::out_of_range("sample_source_image: no image contains >= " +
                                std::to_string(index.n_min) + " pixels of class " +
                                std::to_string(cls));
    }
    return candidates[rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1)];
}

double BlockMask::masked_fraction() const {
    std::size_t masked = 0;
    for (std::uint8_t v : keep) masked += v == 0;
    return keep.empty() ? 0.0 : static_cast<double>(masked) / keep.size();
}

BlockMask BlockMask::ones(int h, int w) {
    BlockMask m;
    m.h = h;
    m.w = w;
    m.block = 1;
    m.keep.assign(static_cast<std::size_t>(h) * w, 1);
    return m;
}

namespace {

BlockMask from_tiles(int h, int w, int block, const std::vector<std::uint8_t>& tile_keep,
                     int tiles_x) {
    BlockMask m;
    m.h = h;
    m.w = w;
    m.block = block;
    m.keep.resize(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        const int ty = y / block;
        for (int x = 0; x < w; ++x) {
            m.keep[static_cast<std::size_t>(y) * w + x] = tile_keep[ty * tiles_x + x / block];
        }
    }
    return m;
}

}  // namespace

BlockMask make_block_mask(int h, int w, int block, double ratio, Rng& rng) {
    if (block < 1 || block > std::min(h, w)) {
        throw std::invalid_argument("make_block_mask: block must be in [1, min(h, w)]");
    }
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw std::invalid_argument("make_block_mask: ratio must be in [0, 1]");
    }
    const int tiles_x = (w + block - 1) / block;
    const int tiles_y = (h + block - 1) / block;
    std::vector<std::uint8_t> tile_keep(static_cast<std::size_t>(tiles_x) * tiles_y);
    for (auto& t : tile_keep) t = rng.bernoulli(ratio) ? 0 : 1;
    return from_tiles(h, w, block, tile_keep, tiles_x);
}

BlockMask make_grid_mask(int h, int w, int block) {
    if (block < 1 || block > std::min(h, w)) {
        throw std::invalid_argument("make_grid_mask: block must be in [1, min(h, w)]");
    }
    const int tiles_x = (w + block - 1) / block;
    const int tiles_y = (h + block - 1) / block;
    std::vector<std::uint8_t> tile_keep(static_cast<std::size_t>(tiles_x) * tiles_y);
    for (int ty = 0; ty < tiles_y; ++ty) {
        for (int tx = 0; tx < tiles_x; ++tx) {
            tile_keep[static_cast<std::size_t>(ty) * tiles_x + tx] = (ty + tx) % 2 == 0 ? 1 : 0;
        }
    }
    return from_tiles(h, w, block, tile_keep, tiles_x);
}

std::vector<std::uint8_t> combine_masked_image(const LabeledImage& x_t,
                                               std::span<const std::uint8_t> pseudo,
                                               const ClassPartition& partition,
                                               const BlockMask& mask_back,
                                               const BlockMask& mask_fore) {
    const std::size_t px = x_t.pixel_count();
    if (pseudo.size() != px || mask_back.keep.size() != px || mask_fore.keep.size() != px) {
        throw std::invalid_argument("combine_masked_image: shape mismatch");
    }
    std::vector<bool> is_background(256, false);
    for (int c : partition.background) is_background[static_cast<std::size_t>(c)] = true;

    std::vector<std::uint8_t> out(px * 3);
    for (std::size_t p = 0; p < px; ++p) {
        const std::uint8_t keep =
            is_background[pseudo[p]] ? mask_back.keep[p] : mask_fore.keep[p];
        out[p * 3 + 0] = keep ? x_t.rgb[p * 3 + 0] : 0;
        out[p * 3 + 1] = keep ? x_t.rgb[p * 3 + 1] : 0;
        out[p * 3 + 2] = keep ? x_t.rgb[p * 3 + 2] : 0;
    }
    return out;
}

}  // namespace omuda::cam
