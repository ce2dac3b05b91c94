#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace omuda {

// Row-major dense tensor of 64-bit floats. This is the only array type in
// the project; shapes are dynamic and kept alongside the flat data.
struct DenseArray {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    DenseArray() = default;
    DenseArray(std::initializer_list<std::size_t> s, double fill = 0.0);
    explicit DenseArray(std::vector<std::size_t> s, double fill = 0.0);

    std::size_t size() const { return data.size(); }
    std::size_t dim(std::size_t axis) const { return shape[axis]; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // 2-D accessors; the caller is responsible for shape.size() == 2.
    double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    bool all_finite() const;
    bool operator==(const DenseArray&) const = default;
};

std::size_t shape_product(std::span<const std::size_t> shape);

namespace num {

// Numerically stable softmax along `axis` (max-subtraction). Slices along
// the axis sum to 1.
DenseArray softmax(const DenseArray& logits, std::size_t axis);

// Piecewise Huber-style loss: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
double smooth_l1(double x);
double smooth_l1_grad(double x);

// Cosine of the angle between two vectors of equal length. Throws
// std::domain_error if either norm is below 1e-12.
double cosine_similarity(std::span<const double> u, std::span<const double> v);

// Mean cross-entropy over non-ignore pixels given softmax probabilities
// {P, K} and per-pixel labels (255 = ignore). Probabilities are clamped at
// 1e-12 before the log; the returned gradient is w.r.t. the logits that
// produced the probabilities. Zero labeled pixels yields loss 0, zero grads.
struct CrossEntropyResult {
    double loss = 0.0;
    DenseArray grad_logits;
    std::size_t counted = 0;
};

CrossEntropyResult mean_cross_entropy(const DenseArray& probs,
                                      std::span<const std::uint8_t> labels);

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t parameter_count = 0;
    bool passed = false;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central-difference check of an analytic gradient. `f` is evaluated at
// params +/- step along each coordinate; relative error per coordinate uses
// max(|analytic|, |numeric|, 1e-8) as denominator.
GradCheckReport finite_diff_check(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> params,
                                  std::span<const double> analytic_grad,
                                  double step,
                                  double tolerance = 1e-4);

constexpr double kNormEpsilon = 1e-12;

}  // namespace num
}  // namespace omuda
