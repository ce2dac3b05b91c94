#include "omuda/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace omuda {

DenseArray::DenseArray(std::initializer_list<std::size_t> s, double fill)
    : shape(s), data(shape_product(shape), fill) {}

DenseArray::DenseArray(std::vector<std::size_t> s, double fill)
    : shape(std::move(s)), data(shape_product(shape), fill) {}

std::size_t shape_product(std::span<const std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

bool DenseArray::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

namespace num {

DenseArray softmax(const DenseArray& logits, std::size_t axis) {
    if (axis >= logits.shape.size()) {
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                    " out of range for rank " +
                                    std::to_string(logits.shape.size()));
    }
    DenseArray out(logits.shape);
    const std::size_t n = logits.shape[axis];
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < logits.shape.size(); ++a) inner *= logits.shape[a];
    const std::size_t outer = logits.size() == 0 ? 0 : logits.size() / (n * inner);

    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, logits.data[base + i * inner]);
            double sum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double e = std::exp(logits.data[base + i * inner] - mx);
                out.data[base + i * inner] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (std::size_t i = 0; i < n; ++i) out.data[base + i * inner] *= inv;
        }
    }
    return out;
}

double smooth_l1(double x) {
    const double a = std::abs(x);
    return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_grad(double x) {
    if (std::abs(x) < 1.0) return x;
    return x > 0.0 ? 1.0 : -1.0;
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw std::invalid_argument("cosine_similarity: length mismatch");
    }
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    nu = std::sqrt(nu);
    nv = std::sqrt(nv);
    if (nu < kNormEpsilon || nv < kNormEpsilon) {
        throw std::domain_error("cosine_similarity: vector norm below epsilon");
    }
    return std::clamp(dot / (nu * nv), -1.0, 1.0);
}

constexpr double kProbClamp = 1e-12;

CrossEntropyResult mean_cross_entropy(const DenseArray& probs,
                                      std::span<const std::uint8_t> labels) {
    if (probs.shape.size() != 2 || probs.shape[0] != labels.size()) {
        throw std::invalid_argument("mean_cross_entropy: probs must be {P, K} with P labels");
    }
    const std::size_t k = probs.shape[1];
    CrossEntropyResult res;
    res.grad_logits = DenseArray(probs.shape);
    for (std::size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] != 255 && labels[p] >= k) {
            throw std::invalid_argument("mean_cross_entropy: label out of range");
        }
        if (labels[p] != 255) res.counted++;
    }
    if (res.counted == 0) return res;

    const double inv = 1.0 / static_cast<double>(res.counted);
    for (std::size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] == 255) continue;
        const double* row = &probs.data[p * k];
        const double py = row[labels[p]];
        res.loss -= std::log(std::max(py, kProbClamp));
        // Gradient of the clamped loss: zero once the clamp is active.
        if (py >= kProbClamp) {
            double* g = &res.grad_logits.data[p * k];
            for (std::size_t c = 0; c < k; ++c) g[c] = row[c] * inv;
            g[labels[p]] -= inv;
        }
    }
    res.loss *= inv;
    return res;
}

GradCheckReport finite_diff_check(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> params,
                                  std::span<const double> analytic_grad,
                                  double step,
                                  double tolerance) {
    if (params.size() != analytic_grad.size()) {
        throw std::invalid_argument("finite_diff_check: gradient size mismatch");
    }
    if (!(step > 0.0)) {
        throw std::invalid_argument("finite_diff_check: step must be positive");
    }
    std::vector<double> p(params.begin(), params.end());
    GradCheckReport report;
    report.parameter_count = p.size();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + step;
        const double fp = f(p);
        p[i] = orig - step;
        const double fm = f(p);
        p[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw std::runtime_error("finite_diff_check: non-finite loss at parameter " +
                                     std::to_string(i));
        }
        const double numeric = (fp - fm) / (2.0 * step);
        const double analytic = analytic_grad[i];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        const double rel = std::abs(analytic - numeric) / denom;
        if (rel > report.max_relative_error) {
            report.max_relative_error = rel;
            report.worst_index = i;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    report.passed = report.max_relative_error < tolerance;
    return report;
}

}  // namespace num
}  // namespace omuda
