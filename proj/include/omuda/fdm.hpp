#pragma once

#include <optional>
#include <span>
#include <vector>

#include "omuda/datagen.hpp"
#include "omuda/numerics.hpp"

namespace omuda::fdm {

// Mean feature vector over a single image's foreground pixels.
struct ForegroundEmbedding {
    std::vector<double> e;
    int image_id = -1;
    int fg_pixel_count = 0;
};

// Mean of feature rows whose label is a foreground class; absent when fewer
// than n_min_fg qualify.
std::optional<ForegroundEmbedding> pool_foreground(const DenseArray& features,
                                                   std::span<const std::uint8_t> labels,
                                                   const ClassPartition& partition,
                                                   int n_min_fg, int image_id);

enum class DistanceNormalization { Mean, Sum };

struct PairStat {
    int a = 0, b = 0;     // indices into the embedding list
    double raw = 0.0;     // ||e_a - e_b||
    double d = 0.0;       // normalized distance
};

struct TripletStat {
    int vertex = 0, p = 0, q = 0;  // angle at `vertex` between (vertex->p) and (vertex->q)
    double angle = 0.0;            // cosine value in [-1, 1]
};

// Pairwise distances and triplet angles over one embedding set. The
// embeddings are retained so kd_loss can differentiate through the neck
// side. `degenerate_pairs` marks the all-zero-distance case (distances are
// then defined as 0 and the distance loss contributes nothing).
struct RelationalStats {
    std::vector<ForegroundEmbedding> embeddings;
    std::vector<PairStat> pairs;
    std::vector<TripletStat> triplets;
    double normalizer = 0.0;
    DistanceNormalization normalization = DistanceNormalization::Mean;
    bool degenerate_pairs = false;
};

// All unordered pairs; requires >= 2 embeddings.
RelationalStats pairwise_distances(std::span<const ForegroundEmbedding> embeddings,
                                   DistanceNormalization normalization);

// Every (vertex, {p, q}) combination; triplets where either difference norm
// is below 1e-12 are skipped. Requires >= 3 embeddings.
RelationalStats triplet_angles(std::span<const ForegroundEmbedding> embeddings);

// Convenience: both relations in one stats object (empty lists when the
// batch is too small for them).
RelationalStats relational_stats(std::span<const ForegroundEmbedding> embeddings,
                                 DistanceNormalization normalization);

struct KdLossResult {
    double l_d = 0.0;
    double l_a = 0.0;
    double l_kd = 0.0;
    // d L_KD / d e for each neck embedding, aligned with neck.embeddings.
    std::vector<std::vector<double>> grad_neck;
};

// Distance + angular distillation between a fixed reference side (pre) and
// the student side (neck). The two stats must be built from the same image
// ids in the same order; gradients flow only into the neck embeddings.
KdLossResult kd_loss(const RelationalStats& pre, const RelationalStats& neck);

}  // namespace omuda::fdm
