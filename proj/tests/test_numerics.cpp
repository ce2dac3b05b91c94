#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "omuda/numerics.hpp"
#include "omuda/rng.hpp"

using namespace omuda;

TEST_CASE("softmax symmetric pair") {
    DenseArray logits({2});
    logits.data = {0.0, 0.0};
    auto out = num::softmax(logits, 0);
    CHECK(out.data[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(out.data[1] == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("softmax huge logits do not overflow") {
    DenseArray logits({2});
    logits.data = {1000.0, 1000.0};
    auto out = num::softmax(logits, 0);
    CHECK(out.all_finite());
    CHECK(out.data[0] == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("softmax closed-form (0, ln 3)") {
    DenseArray logits({2});
    logits.data = {0.0, std::log(3.0)};
    auto out = num::softmax(logits, 0);
    CHECK(out.data[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(out.data[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax invalid axis") {
    DenseArray logits({2, 3});
    CHECK_THROWS_AS((void)num::softmax(logits, 2), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one and shift invariance") {
    Rng rng(42);
    DenseArray logits({5, 7});
    for (auto& v : logits.data) v = rng.uniform(-30.0, 30.0);
    auto out = num::softmax(logits, 1);
    for (std::size_t r = 0; r < 5; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 7; ++c) sum += out.at(r, c);
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }

    DenseArray shifted = logits;
    for (std::size_t r = 0; r < 5; ++r) {
        for (std::size_t c = 0; c < 7; ++c) shifted.at(r, c) += 17.25;
    }
    auto out2 = num::softmax(shifted, 1);
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(std::abs(out.data[i] - out2.data[i]) < 1e-12);
    }
}

TEST_CASE("softmax along axis 0") {
    DenseArray logits({2, 2});
    logits.data = {0.0, 0.0, std::log(3.0), std::log(3.0)};
    auto out = num::softmax(logits, 0);
    CHECK(out.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(out.at(1, 0) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("smooth_l1 piecewise values") {
    CHECK(num::smooth_l1(0.0) == 0.0);
    CHECK(num::smooth_l1(0.5) == 0.125);
    CHECK(num::smooth_l1(2.0) == 1.5);
}

TEST_CASE("smooth_l1 is even") {
    Rng rng(7);
    for (int i = 0; i < 200; ++i) {
        const double x = rng.uniform(-5.0, 5.0);
        CHECK(num::smooth_l1(x) == num::smooth_l1(-x));
    }
}

TEST_CASE("smooth_l1 gradient matches central differences") {
    const double h = 1e-6;
    for (double x = -3.0; x <= 3.0; x += 0.0917) {
        if (std::abs(std::abs(x) - 1.0) < 1e-3) continue;  // kink
        const double numeric = (num::smooth_l1(x + h) - num::smooth_l1(x - h)) / (2.0 * h);
        CHECK(std::abs(num::smooth_l1_grad(x) - numeric) < 1e-6);
    }
}

TEST_CASE("cosine similarity basics") {
    const double u1[] = {1.0, 0.0}, v1[] = {0.0, 1.0};
    CHECK(num::cosine_similarity(u1, v1) == doctest::Approx(0.0).epsilon(1e-14));

    const double u2[] = {2.0, 0.0}, v2[] = {1.0, 0.0};
    CHECK(num::cosine_similarity(u2, v2) == doctest::Approx(1.0).epsilon(1e-14));

    // 1/sqrt(2), evaluated directly as the oracle
    const double u3[] = {1.0, 1.0}, v3[] = {1.0, 0.0};
    CHECK(num::cosine_similarity(u3, v3) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(std::abs(num::cosine_similarity(u3, v3) - 0.7071) < 1e-4);
}

TEST_CASE("cosine similarity scale invariance") {
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> u(6), v(6);
        for (auto& x : u) x = rng.uniform(-2.0, 2.0);
        for (auto& x : v) x = rng.uniform(-2.0, 2.0);
        const double base = num::cosine_similarity(u, v);
        const double a = rng.uniform(0.01, 100.0), b = rng.uniform(0.01, 100.0);
        std::vector<double> ua(6), vb(6);
        for (int i = 0; i < 6; ++i) {
            ua[i] = a * u[i];
            vb[i] = b * v[i];
        }
        CHECK(std::abs(num::cosine_similarity(ua, vb) - base) < 1e-10);
        CHECK(base >= -1.0);
        CHECK(base <= 1.0);
    }
}

TEST_CASE("cosine similarity degenerate vector") {
    const double u[] = {1e-13, 0.0}, v[] = {1.0, 0.0};
    CHECK_THROWS_AS((void)num::cosine_similarity(u, v), std::domain_error);
    const double w[] = {1.0, 0.0, 0.0};
    CHECK_THROWS_AS((void)num::cosine_similarity(w, v), std::invalid_argument);
}

TEST_CASE("finite_diff_check quadratic and linear") {
    auto square = [](std::span<const double> p) { return p[0] * p[0]; };
    const double params[] = {3.0};
    const double grad[] = {6.0};
    auto report = num::finite_diff_check(square, params, grad, 1e-5, 1e-6);
    CHECK(report.passed);
    CHECK(report.max_relative_error < 1e-6);
    CHECK(report.parameter_count == 1);

    auto sum = [](std::span<const double> p) {
        double s = 0.0;
        for (double x : p) s += x;
        return s;
    };
    const double params2[] = {0.3, -2.0, 5.5, 0.0};
    const double grad2[] = {1.0, 1.0, 1.0, 1.0};
    auto report2 = num::finite_diff_check(sum, params2, grad2, 1e-5, 1e-6);
    CHECK(report2.passed);
}

TEST_CASE("finite_diff_check catches a wrong gradient") {
    auto square = [](std::span<const double> p) { return p[0] * p[0]; };
    const double params[] = {3.0};
    const double wrong[] = {5.0};
    auto report = num::finite_diff_check(square, params, wrong, 1e-5, 1e-4);
    CHECK_FALSE(report.passed);
}

TEST_CASE("finite_diff_check rejects non-finite f") {
    auto bad = [](std::span<const double>) { return std::nan(""); };
    const double params[] = {1.0};
    const double grad[] = {0.0};
    CHECK_THROWS_AS((void)num::finite_diff_check(bad, params, grad, 1e-5), std::runtime_error);
    CHECK_THROWS_AS((void)num::finite_diff_check(bad, params, grad, 0.0),
                    std::invalid_argument);
}

TEST_CASE("mean_cross_entropy basics") {
    // Perfect predictions: loss 0.
    DenseArray probs({2, 3});
    probs.data = {1.0, 0.0, 0.0, 0.0, 1.0, 0.0};
    const std::uint8_t labels[] = {0, 1};
    auto res = num::mean_cross_entropy(probs, labels);
    CHECK(res.loss == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(res.counted == 2);

    // Uniform predictions: loss = ln K.
    DenseArray uniform({4, 3}, 1.0 / 3.0);
    const std::uint8_t labels2[] = {0, 2, 1, 255};
    auto res2 = num::mean_cross_entropy(uniform, labels2);
    CHECK(res2.counted == 3);
    CHECK(res2.loss == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("mean_cross_entropy gradient vs finite differences") {
    Rng rng(5);
    const std::size_t p_count = 4, k = 3;
    DenseArray logits({p_count, k});
    for (auto& v : logits.data) v = rng.uniform(-1.0, 1.0);
    const std::uint8_t labels[] = {0, 2, 255, 1};

    auto loss_of = [&](std::span<const double> flat) {
        DenseArray l({p_count, k});
        std::copy(flat.begin(), flat.end(), l.data.begin());
        return num::mean_cross_entropy(num::softmax(l, 1), labels).loss;
    };
    auto analytic = num::mean_cross_entropy(num::softmax(logits, 1), labels).grad_logits;
    auto report = num::finite_diff_check(loss_of, logits.data, analytic.data, 1e-6, 1e-7);
    CHECK(report.passed);
}
