#include "omuda/fdm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace omuda::fdm {

std::optional<ForegroundEmbedding> pool_foreground(const DenseArray& features,
                                                   std::span<const std::uint8_t> labels,
                                                   const ClassPartition& partition,
                                                   int n_min_fg, int image_id) {
    if (features.shape.size() != 2 || features.shape[0] != labels.size()) {
        throw std::invalid_argument("pool_foreground: features must be {P, D} with P labels");
    }
    const std::size_t d = features.shape[1];
    std::vector<bool> is_fg(256, false);
    for (int c : partition.foreground) is_fg[static_cast<std::size_t>(c)] = true;

    ForegroundEmbedding emb;
    emb.image_id = image_id;
    emb.e.assign(d, 0.0);
    for (std::size_t p = 0; p < labels.size(); ++p) {
        if (!is_fg[labels[p]]) continue;
        const double* row = &features.data[p * d];
        for (std::size_t j = 0; j < d; ++j) emb.e[j] += row[j];
        emb.fg_pixel_count++;
    }
    if (emb.fg_pixel_count < n_min_fg || emb.fg_pixel_count == 0) return std::nullopt;
    const double inv = 1.0 / emb.fg_pixel_count;
    for (auto& v : emb.e) v *= inv;
    return emb;
}

namespace {

double distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        s += diff * diff;
    }
    return std::sqrt(s);
}

}  // namespace

RelationalStats pairwise_distances(std::span<const ForegroundEmbedding> embeddings,
                                   DistanceNormalization normalization) {
    if (embeddings.size() < 2) {
        throw std::invalid_argument("pairwise_distances: need at least 2 embeddings");
    }
    RelationalStats stats;
    stats.embeddings.assign(embeddings.begin(), embeddings.end());
    stats.normalization = normalization;

    double total = 0.0;
    for (std::size_t a = 0; a + 1 < embeddings.size(); ++a) {
        for (std::size_t b = a + 1; b < embeddings.size(); ++b) {
            PairStat p;
            p.a = static_cast<int>(a);
            p.b = static_cast<int>(b);
            p.raw = distance(embeddings[a].e, embeddings[b].e);
            total += p.raw;
            stats.pairs.push_back(p);
        }
    }
    stats.normalizer = normalization == DistanceNormalization::Mean
                           ? total / static_cast<double>(stats.pairs.size())
                           : total;
    if (stats.normalizer < num::kNormEpsilon) {
        stats.degenerate_pairs = true;
        stats.normalizer = 0.0;
        for (auto& p : stats.pairs) p.d = 0.0;
    } else {
        for (auto& p : stats.pairs) p.d = p.raw / stats.normalizer;
    }
    return stats;
}

RelationalStats triplet_angles(std::span<const ForegroundEmbedding> embeddings) {
    if (embeddings.size() < 3) {
        throw std::invalid_argument("triplet_angles: need at least 3 embeddings");
    }
    RelationalStats stats;
    stats.embeddings.assign(embeddings.begin(), embeddings.end());
    const int n = static_cast<int>(embeddings.size());
    for (int i = 0; i < n; ++i) {
        for (int p = 0; p < n; ++p) {
            if (p == i) continue;
            for (int q = p + 1; q < n; ++q) {
                if (q == i) continue;
                const auto& ei = embeddings[i].e;
                std::vector<double> u(ei.size()), v(ei.size());
                for (std::size_t d = 0; d < ei.size(); ++d) {
                    u[d] = ei[d] - embeddings[p].e[d];
                    v[d] = ei[d] - embeddings[q].e[d];
                }
                double nu = 0.0, nv = 0.0, dot = 0.0;
                for (std::size_t d = 0; d < ei.size(); ++d) {
                    nu += u[d] * u[d];
                    nv += v[d] * v[d];
                    dot += u[d] * v[d];
                }
                nu = std::sqrt(nu);
                nv = std::sqrt(nv);
                if (nu < num::kNormEpsilon || nv < num::kNormEpsilon) continue;
                TripletStat t;
                t.vertex = i;
                t.p = p;
                t.q = q;
                t.angle = std::clamp(dot / (nu * nv), -1.0, 1.0);
                stats.triplets.push_back(t);
            }
        }
    }
    return stats;
}

RelationalStats relational_stats(std::span<const ForegroundEmbedding> embeddings,
                                 DistanceNormalization normalization) {
    RelationalStats stats;
    stats.embeddings.assign(embeddings.begin(), embeddings.end());
    stats.normalization = normalization;
    if (embeddings.size() >= 2) {
        RelationalStats p = pairwise_distances(embeddings, normalization);
        stats.pairs = std::move(p.pairs);
        stats.normalizer = p.normalizer;
        stats.degenerate_pairs = p.degenerate_pairs;
    }
    if (embeddings.size() >= 3) {
        RelationalStats t = triplet_angles(embeddings);
        stats.triplets = std::move(t.triplets);
    }
    return stats;
}

namespace {

void check_alignment(const RelationalStats& pre, const RelationalStats& neck) {
    if (pre.embeddings.size() != neck.embeddings.size()) {
        throw std::invalid_argument("kd_loss: stats built from different batch sizes");
    }
    for (std::size_t i = 0; i < pre.embeddings.size(); ++i) {
        if (pre.embeddings[i].image_id != neck.embeddings[i].image_id) {
            throw std::invalid_argument("kd_loss: stats built from misaligned image sets");
        }
    }
    if (pre.pairs.size() != neck.pairs.size()) {
        throw std::invalid_argument("kd_loss: misaligned pair lists");
    }
    for (std::size_t i = 0; i < pre.pairs.size(); ++i) {
        if (pre.pairs[i].a != neck.pairs[i].a || pre.pairs[i].b != neck.pairs[i].b) {
            throw std::invalid_argument("kd_loss: misaligned pair lists");
        }
    }
}

bool triplet_less(const TripletStat& x, const TripletStat& y) {
    if (x.vertex != y.vertex) return x.vertex < y.vertex;
    if (x.p != y.p) return x.p < y.p;
    return x.q < y.q;
}

}  // namespace

KdLossResult kd_loss(const RelationalStats& pre, const RelationalStats& neck) {
    check_alignment(pre, neck);

    KdLossResult res;
    const std::size_t n = neck.embeddings.size();
    const std::size_t d = n > 0 ? neck.embeddings[0].e.size() : 0;
    res.grad_neck.assign(n, std::vector<double>(d, 0.0));

    // Distance part. A degenerate side carries no relational signal.
    if (!pre.pairs.empty() && !pre.degenerate_pairs && !neck.degenerate_pairs) {
        const double norm = neck.normalizer;
        const double c_norm =
            neck.normalization == DistanceNormalization::Mean
                ? 1.0 / static_cast<double>(neck.pairs.size())
                : 1.0;
        std::vector<std::vector<double>> t1(n, std::vector<double>(d, 0.0));
        std::vector<std::vector<double>> gsum(n, std::vector<double>(d, 0.0));
        double a_weighted = 0.0;
        std::vector<double> u(d);
        for (std::size_t pi = 0; pi < neck.pairs.size(); ++pi) {
            const auto& pair = neck.pairs[pi];
            const double delta = pre.pairs[pi].d - pair.d;
            res.l_d += num::smooth_l1(delta);
            const double hp = num::smooth_l1_grad(delta);
            a_weighted += hp * pair.raw;

            if (pair.raw < num::kNormEpsilon) continue;  // zero subgradient
            const auto& ea = neck.embeddings[pair.a].e;
            const auto& eb = neck.embeddings[pair.b].e;
            const double inv_raw = 1.0 / pair.raw;
            for (std::size_t j = 0; j < d; ++j) u[j] = (ea[j] - eb[j]) * inv_raw;
            for (std::size_t j = 0; j < d; ++j) {
                t1[pair.a][j] += hp * u[j];
                t1[pair.b][j] -= hp * u[j];
                gsum[pair.a][j] += u[j];
                gsum[pair.b][j] -= u[j];
            }
        }
        const double inv_norm = 1.0 / norm;
        const double scale = a_weighted * c_norm * inv_norm * inv_norm;
        for (std::size_t m = 0; m < n; ++m) {
            for (std::size_t j = 0; j < d; ++j) {
                res.grad_neck[m][j] += -t1[m][j] * inv_norm + scale * gsum[m][j];
            }
        }
    } else if (!pre.pairs.empty()) {
        // Loss is defined as 0 on a degenerate batch; nothing to add.
        res.l_d = 0.0;
    }

    // Angular part: intersect the two (canonically ordered) triplet lists;
    // a triplet skipped on either side contributes nothing.
    std::size_t ip = 0, in = 0;
    std::vector<double> u(d), v(d), du(d), dv(d);
    while (ip < pre.triplets.size() && in < neck.triplets.size()) {
        const auto& tp = pre.triplets[ip];
        const auto& tn = neck.triplets[in];
        if (triplet_less(tp, tn)) {
            ip++;
            continue;
        }
        if (triplet_less(tn, tp)) {
            in++;
            continue;
        }
        const double delta = tp.angle - tn.angle;
        res.l_a += num::smooth_l1(delta);
        const double factor = -num::smooth_l1_grad(delta);  // d loss / d a_neck

        const auto& ei = neck.embeddings[tn.vertex].e;
        const auto& ep = neck.embeddings[tn.p].e;
        const auto& eq = neck.embeddings[tn.q].e;
        double nu = 0.0, nv = 0.0, dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            u[j] = ei[j] - ep[j];
            v[j] = ei[j] - eq[j];
            nu += u[j] * u[j];
            nv += v[j] * v[j];
            dot += u[j] * v[j];
        }
        nu = std::sqrt(nu);
        nv = std::sqrt(nv);
        const double inv_nunv = 1.0 / (nu * nv);
        const double cth = dot * inv_nunv;
        for (std::size_t j = 0; j < d; ++j) {
            du[j] = v[j] * inv_nunv - cth * u[j] / (nu * nu);
            dv[j] = u[j] * inv_nunv - cth * v[j] / (nv * nv);
            res.grad_neck[tn.vertex][j] += factor * (du[j] + dv[j]);
            res.grad_neck[tn.p][j] -= factor * du[j];
            res.grad_neck[tn.q][j] -= factor * dv[j];
        }
        ip++;
        in++;
    }

    res.l_kd = res.l_d + res.l_a;
    return res;
}

}  // namespace omuda::fdm
