#include <doctest.h>

#include <cmath>
#include <map>
#include <stdexcept>

#include "omuda/cam.hpp"
#include "omuda/common.hpp"
#include "omuda/datagen.hpp"

using namespace omuda;
using namespace omuda::cam;

namespace {

LabeledImage tiny_image(int h, int w, std::initializer_list<int> labels) {
    LabeledImage img;
    img.h = h;
    img.w = w;
    img.rgb.assign(static_cast<std::size_t>(h) * w * 3, 100);
    for (int v : labels) img.labels.push_back(static_cast<std::uint8_t>(v));
    REQUIRE(img.labels.size() == img.pixel_count());
    return img;
}

}  // namespace

TEST_CASE("compute_frequencies counts pixels") {
    std::vector<LabeledImage> ds;
    ds.push_back(tiny_image(2, 2, {0, 0, 0, 1}));
    ds.push_back(tiny_image(2, 2, {1, 1, 2, 2}));
    auto freq = compute_frequencies(ds, 3);
    CHECK(freq.f[0] == doctest::Approx(3.0 / 8).epsilon(1e-15));
    CHECK(freq.f[1] == doctest::Approx(3.0 / 8).epsilon(1e-15));
    CHECK(freq.f[2] == doctest::Approx(2.0 / 8).epsilon(1e-15));
}

TEST_CASE("compute_frequencies single class and errors") {
    std::vector<LabeledImage> ds;
    ds.push_back(tiny_image(2, 2, {1, 1, 1, 1}));
    auto freq = compute_frequencies(ds, 3);
    CHECK(freq.f[0] == 0.0);
    CHECK(freq.f[1] == 1.0);
    CHECK(freq.f[2] == 0.0);

    CHECK_THROWS_AS((void)compute_frequencies({}, 3), DataError);
    std::vector<LabeledImage> all_ignore;
    all_ignore.push_back(tiny_image(2, 2, {255, 255, 255, 255}));
    CHECK_THROWS_AS((void)compute_frequencies(all_ignore, 3), DataError);
}

TEST_CASE("compute_frequencies matches brute-force count on generated data") {
    auto cfg = SceneConfig::default_config();
    auto images = datagen::generate_dataset(cfg, Domain::Source, 1000, 7);
    auto freq = compute_frequencies(images, cfg.k);

    // Independent counting pass.
    std::vector<std::uint64_t> counts(cfg.k, 0);
    std::uint64_t total = 0;
    for (const auto& img : images) {
        for (auto label : img.labels) {
            counts[label]++;
            total++;
        }
    }
    for (int c = 0; c < cfg.k; ++c) {
        CHECK(freq.f[c] == static_cast<double>(counts[c]) / total);
    }
}

TEST_CASE("sampling_distribution equal frequencies give uniform branch") {
    ClassFrequencies freq;
    freq.f = {0.2, 0.2, 0.3, 0.3};
    ClassPartition part;
    part.background = {0, 1};
    part.foreground = {2, 3};
    auto dist = sampling_distribution(freq, part, 1.0, 0.7);
    CHECK(dist.p_back[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(dist.p_back[1] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(dist.p_fore[0] == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("sampling_distribution closed form at T=1") {
    ClassFrequencies freq;
    freq.f = {0.9, 0.1};
    ClassPartition part;
    part.background = {0, 1};
    part.foreground = {0, 1};  // same branch content both ways for this check
    auto dist = sampling_distribution(freq, part, 1.0, 1.0);
    // exp(0.1)/ (exp(0.1)+exp(0.9)) = 1/(1+e^{0.8})
    const double expected0 = 1.0 / (1.0 + std::exp(0.8));
    CHECK(dist.p_back[0] == doctest::Approx(expected0).epsilon(1e-12));
    CHECK(dist.p_back[1] == doctest::Approx(1.0 - expected0).epsilon(1e-12));
    CHECK(std::abs(dist.p_back[0] - 0.3100) < 1e-4);
    CHECK(std::abs(dist.p_back[1] - 0.6900) < 1e-4);

    // Sharper temperature favors the rare class more.
    auto sharper = sampling_distribution(freq, part, 0.7, 0.7);
    CHECK(sharper.p_back[1] > dist.p_back[1]);
}

TEST_CASE("sampling_distribution shift invariance and T->inf limit") {
    ClassFrequencies freq;
    freq.f = {0.5, 0.3, 0.15, 0.05};
    ClassPartition part;
    part.background = {0, 1};
    part.foreground = {2, 3};
    auto base = sampling_distribution(freq, part, 1.3, 0.9);

    // Adding a constant to all (1 - f_k) within a branch is a shift of the
    // softmax logits; realized by shifting every f_k by the same constant.
    ClassFrequencies shifted;
    shifted.f = freq.f;
    for (auto& f : shifted.f) f -= 0.11;
    auto moved = sampling_distribution(shifted, part, 1.3, 0.9);
    for (std::size_t i = 0; i < base.p_back.size(); ++i) {
        CHECK(std::abs(base.p_back[i] - moved.p_back[i]) < 1e-12);
    }
    for (std::size_t i = 0; i < base.p_fore.size(); ++i) {
        CHECK(std::abs(base.p_fore[i] - moved.p_fore[i]) < 1e-12);
    }

    auto flat = sampling_distribution(freq, part, 1e6, 1e6);
    for (double p : flat.p_back) CHECK(std::abs(p - 0.5) < 1e-3);
    for (double p : flat.p_fore) CHECK(std::abs(p - 0.5) < 1e-3);

    CHECK_THROWS_AS((void)sampling_distribution(freq, part, 0.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS((void)sampling_distribution(freq, part, 1.0, -1.0), std::invalid_argument);
}

TEST_CASE("sample_source_image degenerate distribution") {
    SamplingDistribution dist;
    dist.fore_classes = {2};
    dist.p_fore = {1.0};
    dist.back_classes = {2};
    dist.p_back = {1.0};
    dist.p_fg_branch = 1.0;

    ClassIndex index;
    index.n_min = 1;
    index.images_by_class.resize(3);
    index.images_by_class[2] = {4, 7};

    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        const int id = sample_source_image(dist, index, rng);
        CHECK((id == 4 || id == 7));
    }
}

TEST_CASE("sample_source_image empirical frequencies match closed form") {
    ClassFrequencies freq;
    freq.f = {0.4, 0.3, 0.2, 0.1};
    ClassPartition part;
    part.background = {0, 1};
    part.foreground = {2, 3};
    auto dist = sampling_distribution(freq, part, 1.0, 0.7, 0.35);

    ClassIndex index;
    index.n_min = 1;
    index.images_by_class.resize(4);
    // Disjoint image sets per class let the drawn class be recovered.
    index.images_by_class[0] = {0};
    index.images_by_class[1] = {1};
    index.images_by_class[2] = {2};
    index.images_by_class[3] = {3};

    Rng rng(17);
    const int n = 100000;
    std::vector<int> counts(4, 0);
    for (int i = 0; i < n; ++i) counts[sample_source_image(dist, index, rng)]++;

    const double expected[] = {
        (1.0 - 0.35) * dist.p_back[0], (1.0 - 0.35) * dist.p_back[1],
        0.35 * dist.p_fore[0], 0.35 * dist.p_fore[1]};
    for (int c = 0; c < 4; ++c) {
        CHECK(std::abs(counts[c] / double(n) - expected[c]) < 0.01);
    }
}

TEST_CASE("sample_source_image names the class with no candidates") {
    SamplingDistribution dist;
    dist.fore_classes = {5};
    dist.p_fore = {1.0};
    dist.p_fg_branch = 1.0;
    ClassIndex index;
    index.n_min = 9999;
    index.images_by_class.resize(6);
    Rng rng(1);
    try {
        (void)sample_source_image(dist, index, rng);
        FAIL("expected out_of_range");
    } catch (const std::out_of_range& e) {
        CHECK(std::string(e.what()).find("class 5") != std::string::npos);
    }
}

TEST_CASE("block mask ratio extremes") {
    Rng rng(8);
    auto all_kept = make_block_mask(64, 64, 16, 0.0, rng);
    CHECK(all_kept.masked_fraction() == 0.0);
    auto all_masked = make_block_mask(64, 64, 16, 1.0, rng);
    CHECK(all_masked.masked_fraction() == 1.0);
    CHECK_THROWS_AS((void)make_block_mask(64, 64, 0, 0.5, rng), std::invalid_argument);
    CHECK_THROWS_AS((void)make_block_mask(64, 64, 65, 0.5, rng), std::invalid_argument);
    CHECK_THROWS_AS((void)make_block_mask(64, 64, 16, 1.5, rng), std::invalid_argument);
}

TEST_CASE("block mask tiles are constant and fraction concentrates") {
    Rng rng(9);
    double mean = 0.0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        auto mask = make_block_mask(64, 64, 16, 0.7, rng);
        mean += mask.masked_fraction();
        if (t < 10) {
            for (int ty = 0; ty < 4; ++ty) {
                for (int tx = 0; tx < 4; ++tx) {
                    const auto ref = mask.keep[static_cast<std::size_t>(ty * 16) * 64 + tx * 16];
                    for (int y = ty * 16; y < (ty + 1) * 16; ++y) {
                        for (int x = tx * 16; x < (tx + 1) * 16; ++x) {
                            REQUIRE(mask.keep[static_cast<std::size_t>(y) * 64 + x] == ref);
                        }
                    }
                }
            }
        }
    }
    mean /= trials;
    CHECK(std::abs(mean - 0.7) < 0.01);
}

TEST_CASE("grid mask alternates tiles") {
    auto mask = make_grid_mask(8, 8, 2);
    CHECK(mask.keep[0] == 1);
    CHECK(mask.keep[2] == 0);  // next tile over
    CHECK(mask.masked_fraction() == doctest::Approx(0.5));
}

TEST_CASE("combine_masked_image identity with all-ones masks") {
    auto cfg = SceneConfig::default_config();
    auto img = datagen::generate_scene(cfg, Domain::Target, 3);
    auto ones = BlockMask::ones(img.h, img.w);
    std::vector<std::uint8_t> pseudo(img.pixel_count(), 4);
    auto out = combine_masked_image(img, pseudo, cfg.partition, ones, ones);
    CHECK(out == img.rgb);
}

TEST_CASE("combine_masked_image all-background collapses to back mask") {
    auto cfg = SceneConfig::default_config();
    auto img = datagen::generate_scene(cfg, Domain::Target, 4);
    Rng rng(5);
    auto back = make_block_mask(img.h, img.w, 8, 0.5, rng);
    auto fore = make_block_mask(img.h, img.w, 4, 0.5, rng);
    std::vector<std::uint8_t> pseudo(img.pixel_count(), 1);  // background class
    auto out = combine_masked_image(img, pseudo, cfg.partition, back, fore);
    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
        for (int ch = 0; ch < 3; ++ch) {
            const std::uint8_t expected = back.keep[p] ? img.rgb[p * 3 + ch] : 0;
            REQUIRE(out[p * 3 + ch] == expected);
        }
    }
}

TEST_CASE("combine_masked_image matches per-pixel oracle on random cases") {
    auto cfg = SceneConfig::default_config();
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        auto img = datagen::generate_scene(cfg, Domain::Target, 100 + trial);
        auto back = make_block_mask(img.h, img.w, 32, 0.7, rng);
        auto fore = make_block_mask(img.h, img.w, 16, 0.7, rng);
        std::vector<std::uint8_t> pseudo(img.pixel_count());
        for (auto& v : pseudo) v = static_cast<std::uint8_t>(rng.uniform_int(0, cfg.k - 1));

        auto out = combine_masked_image(img, pseudo, cfg.partition, back, fore);
        for (std::size_t p = 0; p < img.pixel_count(); ++p) {
            const bool is_bg = pseudo[p] <= 3;  // default partition
            const auto& mask = is_bg ? back : fore;
            for (int ch = 0; ch < 3; ++ch) {
                const std::uint8_t expected = mask.keep[p] ? img.rgb[p * 3 + ch] : 0;
                REQUIRE(out[p * 3 + ch] == expected);
                // Every output pixel is either 0 or the input pixel.
                REQUIRE((out[p * 3 + ch] == 0 || out[p * 3 + ch] == img.rgb[p * 3 + ch]));
            }
        }
    }
}

TEST_CASE("combine_masked_image rejects shape mismatch") {
    auto cfg = SceneConfig::default_config();
    auto img = datagen::generate_scene(cfg, Domain::Target, 3);
    auto ones = BlockMask::ones(img.h, img.w);
    std::vector<std::uint8_t> short_pseudo(img.pixel_count() - 1, 0);
    CHECK_THROWS_AS((void)combine_masked_image(img, short_pseudo, cfg.partition, ones, ones),
                    std::invalid_argument);
}

TEST_CASE("build_class_index honors n_min") {
    std::vector<LabeledImage> ds;
    ds.push_back(tiny_image(2, 2, {0, 0, 1, 1}));
    ds.push_back(tiny_image(2, 2, {1, 1, 1, 1}));
    auto index = build_class_index(ds, 2, 3);
    CHECK(index.images_by_class[0].empty());
    REQUIRE(index.images_by_class[1].size() == 1);
    CHECK(index.images_by_class[1][0] == 1);

    auto loose = build_class_index(ds, 2, 2);
    CHECK(loose.images_by_class[0] == std::vector<int>{0});
    CHECK(loose.images_by_class[1] == std::vector<int>{0, 1});
}
