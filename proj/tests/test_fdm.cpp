#include <doctest.h>

#include <cmath>

#include "omuda/fdm.hpp"
#include "omuda/rng.hpp"

using namespace omuda;
using namespace omuda::fdm;

namespace {

ForegroundEmbedding emb(int id, std::initializer_list<double> values, int count = 10) {
    ForegroundEmbedding e;
    e.image_id = id;
    e.e = values;
    e.fg_pixel_count = count;
    return e;
}

ClassPartition default_partition() {
    ClassPartition p;
    p.background = {0, 1, 2, 3};
    p.foreground = {4, 5, 6, 7};
    return p;
}

std::vector<ForegroundEmbedding> random_embeddings(Rng& rng, int n, int d) {
    std::vector<ForegroundEmbedding> embs;
    for (int i = 0; i < n; ++i) {
        ForegroundEmbedding e;
        e.image_id = i;
        e.fg_pixel_count = 10;
        for (int j = 0; j < d; ++j) e.e.push_back(rng.uniform(-1.0, 1.0));
        embs.push_back(std::move(e));
    }
    return embs;
}

}  // namespace

TEST_CASE("pool_foreground basic cases") {
    auto part = default_partition();

    DenseArray features({4, 2});
    features.data = {1, 2, 3, 4, 5, 6, 7, 8};

    const std::uint8_t all_bg[] = {0, 1, 2, 3};
    CHECK_FALSE(pool_foreground(features, all_bg, part, 1, 0).has_value());

    const std::uint8_t one_fg[] = {0, 5, 1, 2};
    auto single = pool_foreground(features, one_fg, part, 1, 7);
    REQUIRE(single.has_value());
    CHECK(single->image_id == 7);
    CHECK(single->fg_pixel_count == 1);
    CHECK(single->e == std::vector<double>{3, 4});

    // Below n_min_fg: absent.
    CHECK_FALSE(pool_foreground(features, one_fg, part, 2, 7).has_value());
}

TEST_CASE("pool_foreground matches a brute-force masked average") {
    auto part = default_partition();
    Rng rng(31);
    DenseArray features({16, 3});
    for (auto& v : features.data) v = rng.uniform(-2.0, 2.0);
    std::vector<std::uint8_t> labels(16);
    for (auto& v : labels) v = static_cast<std::uint8_t>(rng.uniform_int(0, 7));

    auto pooled = pool_foreground(features, labels, part, 1, 0);
    std::vector<double> expected(3, 0.0);
    int count = 0;
    for (int p = 0; p < 16; ++p) {
        if (labels[p] < 4) continue;
        for (int j = 0; j < 3; ++j) expected[j] += features.at(p, j);
        count++;
    }
    REQUIRE(count > 0);
    REQUIRE(pooled.has_value());
    CHECK(pooled->fg_pixel_count == count);
    for (int j = 0; j < 3; ++j) {
        CHECK(pooled->e[j] == doctest::Approx(expected[j] / count).epsilon(1e-14));
    }
}

TEST_CASE("pairwise distances of identical embeddings are zero") {
    std::vector<ForegroundEmbedding> embs = {emb(0, {1.0, 2.0}), emb(1, {1.0, 2.0})};
    auto stats = pairwise_distances(embs, DistanceNormalization::Mean);
    REQUIRE(stats.pairs.size() == 1);
    CHECK(stats.pairs[0].d == 0.0);
    CHECK(stats.degenerate_pairs);
}

TEST_CASE("pairwise distances on collinear points") {
    // Points at 0, 1, 3 on a line; pair order (0,1), (0,2), (1,2).
    std::vector<ForegroundEmbedding> embs = {emb(0, {0.0}), emb(1, {1.0}), emb(2, {3.0})};

    auto mean_stats = pairwise_distances(embs, DistanceNormalization::Mean);
    REQUIRE(mean_stats.pairs.size() == 3);
    CHECK(mean_stats.pairs[0].raw == doctest::Approx(1.0));
    CHECK(mean_stats.pairs[1].raw == doctest::Approx(3.0));
    CHECK(mean_stats.pairs[2].raw == doctest::Approx(2.0));
    CHECK(mean_stats.normalizer == doctest::Approx(2.0));
    CHECK(mean_stats.pairs[0].d == doctest::Approx(0.5));
    CHECK(mean_stats.pairs[1].d == doctest::Approx(1.5));
    CHECK(mean_stats.pairs[2].d == doctest::Approx(1.0));

    auto sum_stats = pairwise_distances(embs, DistanceNormalization::Sum);
    CHECK(sum_stats.normalizer == doctest::Approx(6.0));
    CHECK(sum_stats.pairs[0].d == doctest::Approx(1.0 / 6));
    CHECK(sum_stats.pairs[1].d == doctest::Approx(3.0 / 6));
    CHECK(sum_stats.pairs[2].d == doctest::Approx(2.0 / 6));

    // Under mean normalization the listed distances average to one.
    double mean = 0.0;
    for (const auto& p : mean_stats.pairs) mean += p.d;
    mean /= mean_stats.pairs.size();
    CHECK(std::abs(mean - 1.0) < 1e-10);

    CHECK_THROWS_AS((void)pairwise_distances(std::vector<ForegroundEmbedding>{emb(0, {1.0})},
                                             DistanceNormalization::Mean),
                    std::invalid_argument);
}

TEST_CASE("triplet angles right and equilateral") {
    // Right angle at vertex 0.
    std::vector<ForegroundEmbedding> right = {emb(0, {0.0, 0.0}), emb(1, {1.0, 0.0}),
                                              emb(2, {0.0, 1.0})};
    auto stats = triplet_angles(right);
    REQUIRE(stats.triplets.size() == 3);
    for (const auto& t : stats.triplets) {
        if (t.vertex == 0) CHECK(t.angle == doctest::Approx(0.0).epsilon(1e-14));
    }

    // Equilateral triangle: cos 60 degrees at every vertex.
    std::vector<ForegroundEmbedding> equi = {emb(0, {0.0, 0.0}), emb(1, {1.0, 0.0}),
                                             emb(2, {0.5, std::sqrt(3.0) / 2.0})};
    auto estats = triplet_angles(equi);
    REQUIRE(estats.triplets.size() == 3);
    for (const auto& t : estats.triplets) {
        CHECK(t.angle == doctest::Approx(0.5).epsilon(1e-12));
    }

    CHECK_THROWS_AS(
        (void)triplet_angles(std::vector<ForegroundEmbedding>{emb(0, {1.0}), emb(1, {2.0})}),
        std::invalid_argument);
}

TEST_CASE("degenerate triplets are skipped, not fatal") {
    std::vector<ForegroundEmbedding> embs = {emb(0, {0.0, 0.0}), emb(1, {0.0, 0.0}),
                                             emb(2, {1.0, 0.0})};
    auto stats = triplet_angles(embs);
    // Every triplet touching the duplicate pair from its vertex is skipped.
    // Vertex 2 sees e2-e0 == e2-e1, a valid angle of 1; vertices 0 and 1
    // each have one zero-length difference.
    REQUIRE(stats.triplets.size() == 1);
    CHECK(stats.triplets[0].vertex == 2);
    CHECK(stats.triplets[0].angle == doctest::Approx(1.0));
}

TEST_CASE("kd_loss is zero for identical relational structure") {
    Rng rng(41);
    auto embs = random_embeddings(rng, 4, 6);
    auto pre = relational_stats(embs, DistanceNormalization::Mean);
    auto neck = relational_stats(embs, DistanceNormalization::Mean);
    auto kd = kd_loss(pre, neck);
    CHECK(kd.l_d == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(kd.l_a == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(kd.l_kd == doctest::Approx(0.0).epsilon(1e-15));
    for (const auto& g : kd.grad_neck) {
        for (double v : g) CHECK(std::abs(v) < 1e-12);
    }
}

TEST_CASE("kd_loss vanishes under uniform scaling in mean mode") {
    Rng rng(43);
    auto embs = random_embeddings(rng, 4, 5);
    auto scaled = embs;
    for (auto& e : scaled) {
        for (auto& v : e.e) v *= 5.0;
    }
    auto pre = relational_stats(embs, DistanceNormalization::Mean);
    auto neck = relational_stats(scaled, DistanceNormalization::Mean);
    auto kd = kd_loss(pre, neck);
    CHECK(std::abs(kd.l_kd) < 1e-12);

    // Sum mode: the distance ratio also cancels the scale.
    auto pre_s = relational_stats(embs, DistanceNormalization::Sum);
    auto neck_s = relational_stats(scaled, DistanceNormalization::Sum);
    CHECK(std::abs(kd_loss(pre_s, neck_s).l_kd) < 1e-12);
}

TEST_CASE("kd_loss is invariant under rigid motions of the neck set") {
    Rng rng(47);
    auto pre_embs = random_embeddings(rng, 5, 3);
    auto neck_embs = random_embeddings(rng, 5, 3);
    auto pre = relational_stats(pre_embs, DistanceNormalization::Mean);
    const double base = kd_loss(pre, relational_stats(neck_embs, DistanceNormalization::Mean)).l_kd;

    for (int trial = 0; trial < 20; ++trial) {
        // Random rotation from Gram-Schmidt on a random matrix + translation.
        double m[3][3];
        for (auto& row : m) {
            for (auto& v : row) v = rng.normal();
        }
        // Orthonormalize columns.
        for (int c = 0; c < 3; ++c) {
            for (int prev = 0; prev < c; ++prev) {
                double dot = 0.0;
                for (int r = 0; r < 3; ++r) dot += m[r][c] * m[r][prev];
                for (int r = 0; r < 3; ++r) m[r][c] -= dot * m[r][prev];
            }
            double norm = 0.0;
            for (int r = 0; r < 3; ++r) norm += m[r][c] * m[r][c];
            norm = std::sqrt(norm);
            for (int r = 0; r < 3; ++r) m[r][c] /= norm;
        }
        const double shift[3] = {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};

        auto moved = neck_embs;
        for (auto& e : moved) {
            double out[3];
            for (int r = 0; r < 3; ++r) {
                out[r] = shift[r];
                for (int c = 0; c < 3; ++c) out[r] += m[r][c] * e.e[c];
            }
            e.e.assign(out, out + 3);
        }
        const double rotated =
            kd_loss(pre, relational_stats(moved, DistanceNormalization::Mean)).l_kd;
        CHECK(std::abs(rotated - base) < 1e-8);
    }
}

TEST_CASE("kd_loss gradient matches finite differences") {
    Rng rng(53);
    auto pre_embs = random_embeddings(rng, 3, 4);
    auto neck_embs = random_embeddings(rng, 3, 4);
    auto pre = relational_stats(pre_embs, DistanceNormalization::Mean);

    auto loss_of = [&](const std::vector<ForegroundEmbedding>& embs) {
        return kd_loss(pre, relational_stats(embs, DistanceNormalization::Mean)).l_kd;
    };
    auto kd = kd_loss(pre, relational_stats(neck_embs, DistanceNormalization::Mean));

    std::vector<double> flat, analytic;
    for (int i = 0; i < 3; ++i) {
        flat.insert(flat.end(), neck_embs[i].e.begin(), neck_embs[i].e.end());
        analytic.insert(analytic.end(), kd.grad_neck[i].begin(), kd.grad_neck[i].end());
    }
    auto f = [&](std::span<const double> params) {
        auto probe = neck_embs;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 4; ++j) probe[i].e[j] = params[i * 4 + j];
        }
        return loss_of(probe);
    };
    auto report = num::finite_diff_check(f, flat, analytic, 1e-6, 1e-4);
    CHECK(report.passed);

    // Sum mode too.
    auto pre_s = relational_stats(pre_embs, DistanceNormalization::Sum);
    auto kd_s = kd_loss(pre_s, relational_stats(neck_embs, DistanceNormalization::Sum));
    std::vector<double> analytic_s;
    for (int i = 0; i < 3; ++i) {
        analytic_s.insert(analytic_s.end(), kd_s.grad_neck[i].begin(), kd_s.grad_neck[i].end());
    }
    auto f_sum = [&](std::span<const double> params) {
        auto probe = neck_embs;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 4; ++j) probe[i].e[j] = params[i * 4 + j];
        }
        return kd_loss(pre_s, relational_stats(probe, DistanceNormalization::Sum)).l_kd;
    };
    CHECK(num::finite_diff_check(f_sum, flat, analytic_s, 1e-6, 1e-4).passed);
}

TEST_CASE("pre-side embeddings are treated as constants") {
    Rng rng(59);
    auto pre_embs = random_embeddings(rng, 3, 4);
    auto neck_embs = random_embeddings(rng, 3, 4);
    auto neck = relational_stats(neck_embs, DistanceNormalization::Mean);

    // Finite differences on the pre side against the fixed neck stats: the
    // loss only depends on pre through its (re-built) stats, so this probes
    // that kd_loss itself never differentiates the pre inputs.
    auto kd = kd_loss(relational_stats(pre_embs, DistanceNormalization::Mean), neck);
    CHECK(kd.grad_neck.size() == neck_embs.size());  // grads exist only for neck

    // Rebuilding pre stats from perturbed embeddings changes the loss, but
    // holding the stats fixed (as kd_loss receives them) it cannot.
    auto fixed_pre = relational_stats(pre_embs, DistanceNormalization::Mean);
    auto kd1 = kd_loss(fixed_pre, neck);
    auto perturbed = pre_embs;
    perturbed[0].e[0] += 0.123;  // mutate the raw inputs, keep the stats
    auto fixed_pre2 = fixed_pre;
    fixed_pre2.embeddings = perturbed;
    auto kd2 = kd_loss(fixed_pre2, neck);
    CHECK(kd1.l_kd == kd2.l_kd);
}

TEST_CASE("kd_loss rejects misaligned stats") {
    Rng rng(61);
    auto a = random_embeddings(rng, 3, 4);
    auto b = random_embeddings(rng, 4, 4);
    CHECK_THROWS_AS((void)kd_loss(relational_stats(a, DistanceNormalization::Mean),
                                  relational_stats(b, DistanceNormalization::Mean)),
                    std::invalid_argument);

    auto c = random_embeddings(rng, 3, 4);
    c[1].image_id = 99;
    CHECK_THROWS_AS((void)kd_loss(relational_stats(a, DistanceNormalization::Mean),
                                  relational_stats(c, DistanceNormalization::Mean)),
                    std::invalid_argument);
}

TEST_CASE("l_kd is nonnegative and zero only for matching stats") {
    Rng rng(67);
    for (int trial = 0; trial < 30; ++trial) {
        auto pre_embs = random_embeddings(rng, 4, 3);
        auto neck_embs = random_embeddings(rng, 4, 3);
        auto kd = kd_loss(relational_stats(pre_embs, DistanceNormalization::Mean),
                          relational_stats(neck_embs, DistanceNormalization::Mean));
        CHECK(kd.l_kd >= 0.0);
    }
}
