#include "omuda/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "omuda/common.hpp"

namespace omuda::model {

DenseArray featurize(const LabeledImage& image) {
    return featurize_rgb(image.h, image.w, image.rgb);
}

DenseArray featurize_rgb(int h, int w, std::span<const std::uint8_t> rgb) {
    if (h < 3 || w < 3) throw std::invalid_argument("featurize: image must be at least 3x3");
    if (rgb.size() != static_cast<std::size_t>(h) * w * 3) {
        throw std::invalid_argument("featurize: rgb size mismatch");
    }
    DenseArray out({static_cast<std::size_t>(h) * w, kFeatureDim});
    constexpr double inv255 = 1.0 / 255.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double mean[3] = {0, 0, 0};
            double gray_sum = 0.0, gray_sq = 0.0;
            for (int dy = -1; dy <= 1; ++dy) {
                const int yy = std::clamp(y + dy, 0, h - 1);
                for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = std::clamp(x + dx, 0, w - 1);
                    const std::size_t q = (static_cast<std::size_t>(yy) * w + xx) * 3;
                    const double r = rgb[q + 0] * inv255;
                    const double g = rgb[q + 1] * inv255;
                    const double b = rgb[q + 2] * inv255;
                    mean[0] += r;
                    mean[1] += g;
                    mean[2] += b;
                    const double gray = (r + g + b) / 3.0;
                    gray_sum += gray;
                    gray_sq += gray * gray;
                }
            }
            const std::size_t p = static_cast<std::size_t>(y) * w + x;
            const std::size_t base = (static_cast<std::size_t>(p)) * 3;
            double* f = &out.data[p * kFeatureDim];
            f[0] = rgb[base + 0] * inv255;
            f[1] = rgb[base + 1] * inv255;
            f[2] = rgb[base + 2] * inv255;
            f[3] = mean[0] / 9.0;
            f[4] = mean[1] / 9.0;
            f[5] = mean[2] / 9.0;
            const double g_mean = gray_sum / 9.0;
            f[6] = std::sqrt(std::max(0.0, gray_sq / 9.0 - g_mean * g_mean));
            f[7] = static_cast<double>(y) / h;
            f[8] = static_cast<double>(x) / w;
        }
    }
    return out;
}

SegModel SegModel::init(int d_in, int d_hid, int k, Rng& rng) {
    SegModel m;
    m.d_in = d_in;
    m.d_hid = d_hid;
    m.k = k;
    m.w1 = DenseArray({static_cast<std::size_t>(d_in), static_cast<std::size_t>(d_hid)});
    m.b1 = DenseArray({static_cast<std::size_t>(d_hid)});
    m.w2 = DenseArray({static_cast<std::size_t>(d_hid), static_cast<std::size_t>(k)});
    m.b2 = DenseArray({static_cast<std::size_t>(k)});
    const double s1 = std::sqrt(2.0 / d_in);
    const double s2 = std::sqrt(2.0 / d_hid);
    for (auto& v : m.w1.data) v = rng.normal(0.0, s1);
    for (auto& v : m.w2.data) v = rng.normal(0.0, s2);
    // Small random biases keep pre-activations off the exact ReLU kink even
    // for all-zero feature vectors (fully masked border pixels).
    for (auto& v : m.b1.data) v = rng.normal(0.0, 0.05);
    for (auto& v : m.b2.data) v = rng.normal(0.0, 0.05);
    return m;
}

std::size_t SegModel::parameter_count() const {
    return w1.size() + b1.size() + w2.size() + b2.size();
}

std::vector<double> SegModel::flatten() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const auto* arr : {&w1, &b1, &w2, &b2}) {
        flat.insert(flat.end(), arr->data.begin(), arr->data.end());
    }
    return flat;
}

void SegModel::unflatten(std::span<const double> flat) {
    if (flat.size() != parameter_count()) {
        throw std::invalid_argument("SegModel::unflatten: size mismatch");
    }
    std::size_t pos = 0;
    for (auto* arr : {&w1, &b1, &w2, &b2}) {
        std::copy_n(flat.begin() + pos, arr->size(), arr->data.begin());
        pos += arr->size();
    }
}

bool SegModel::same_shape(const SegModel& other) const {
    return d_in == other.d_in && d_hid == other.d_hid && k == other.k;
}

ParamGrads ParamGrads::zeros_like(const SegModel& m) {
    ParamGrads g;
    g.w1 = DenseArray(m.w1.shape);
    g.b1 = DenseArray(m.b1.shape);
    g.w2 = DenseArray(m.w2.shape);
    g.b2 = DenseArray(m.b2.shape);
    return g;
}

void ParamGrads::accumulate(const ParamGrads& other) {
    auto add = [](DenseArray& a, const DenseArray& b) {
        for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
    };
    add(w1, other.w1);
    add(b1, other.b1);
    add(w2, other.w2);
    add(b2, other.b2);
}

std::vector<double> ParamGrads::flatten() const {
    std::vector<double> flat;
    flat.reserve(w1.size() + b1.size() + w2.size() + b2.size());
    for (const auto* arr : {&w1, &b1, &w2, &b2}) {
        flat.insert(flat.end(), arr->data.begin(), arr->data.end());
    }
    return flat;
}

bool ParamGrads::all_finite() const {
    return w1.all_finite() && b1.all_finite() && w2.all_finite() && b2.all_finite();
}

ForwardResult forward(const SegModel& m, const DenseArray& feats) {
    if (feats.shape.size() != 2 || feats.shape[1] != static_cast<std::size_t>(m.d_in)) {
        throw std::invalid_argument("forward: features must be {P, d_in}");
    }
    const std::size_t p_count = feats.shape[0];
    const int d_in = m.d_in, d_hid = m.d_hid, k = m.k;
    ForwardResult res;
    res.neck = DenseArray({p_count, static_cast<std::size_t>(d_hid)});
    res.logits = DenseArray({p_count, static_cast<std::size_t>(k)});

    for (std::size_t p = 0; p < p_count; ++p) {
        const double* f = &feats.data[p * d_in];
        double* neck = &res.neck.data[p * d_hid];
        for (int j = 0; j < d_hid; ++j) neck[j] = m.b1.data[j];
        for (int i = 0; i < d_in; ++i) {
            const double fi = f[i];
            const double* w = &m.w1.data[static_cast<std::size_t>(i) * d_hid];
            for (int j = 0; j < d_hid; ++j) neck[j] += fi * w[j];
        }
        for (int j = 0; j < d_hid; ++j) neck[j] = neck[j] > 0.0 ? neck[j] : 0.0;

        double* logits = &res.logits.data[p * k];
        for (int c = 0; c < k; ++c) logits[c] = m.b2.data[c];
        for (int j = 0; j < d_hid; ++j) {
            const double nj = neck[j];
            if (nj == 0.0) continue;
            const double* w = &m.w2.data[static_cast<std::size_t>(j) * k];
            for (int c = 0; c < k; ++c) logits[c] += nj * w[c];
        }
    }
    return res;
}

ParamGrads backward(const SegModel& m, const DenseArray& feats, const DenseArray& neck,
                    const DenseArray& d_logits, const DenseArray& d_neck) {
    const std::size_t p_count = feats.shape[0];
    const int d_in = m.d_in, d_hid = m.d_hid, k = m.k;
    const bool has_logits = d_logits.size() != 0;
    const bool has_neck = d_neck.size() != 0;
    if (has_logits && (d_logits.shape.size() != 2 || d_logits.shape[0] != p_count ||
                       d_logits.shape[1] != static_cast<std::size_t>(k))) {
        throw std::invalid_argument("backward: d_logits shape mismatch");
    }
    if (has_neck && (d_neck.shape.size() != 2 || d_neck.shape[0] != p_count ||
                     d_neck.shape[1] != static_cast<std::size_t>(d_hid))) {
        throw std::invalid_argument("backward: d_neck shape mismatch");
    }

    ParamGrads g = ParamGrads::zeros_like(m);
    std::vector<double> g_pre(d_hid);
    for (std::size_t p = 0; p < p_count; ++p) {
        const double* nk = &neck.data[p * d_hid];
        const double* gl = has_logits ? &d_logits.data[p * k] : nullptr;

        if (has_logits) {
            for (int j = 0; j < d_hid; ++j) {
                const double nj = nk[j];
                if (nj == 0.0) continue;
                double* dw2 = &g.w2.data[static_cast<std::size_t>(j) * k];
                for (int c = 0; c < k; ++c) dw2[c] += nj * gl[c];
            }
            for (int c = 0; c < k; ++c) g.b2.data[c] += gl[c];
        }

        for (int j = 0; j < d_hid; ++j) {
            double s = 0.0;
            if (has_logits) {
                const double* w = &m.w2.data[static_cast<std::size_t>(j) * k];
                for (int c = 0; c < k; ++c) s += gl[c] * w[c];
            }
            if (has_neck) s += d_neck.data[p * d_hid + j];
            // ReLU mask; neck stores max(0, pre) so pre <= 0 iff neck == 0.
            g_pre[j] = nk[j] > 0.0 ? s : 0.0;
            g.b1.data[j] += g_pre[j];
        }
        const double* f = &feats.data[p * d_in];
        for (int i = 0; i < d_in; ++i) {
            const double fi = f[i];
            if (fi == 0.0) continue;
            double* dw1 = &g.w1.data[static_cast<std::size_t>(i) * d_hid];
            for (int j = 0; j < d_hid; ++j) dw1[j] += fi * g_pre[j];
        }
    }
    return g;
}

void ema_update(SegModel& teacher, const SegModel& student, double alpha) {
    if (!teacher.same_shape(student)) {
        throw std::invalid_argument("ema_update: model shape mismatch");
    }
    if (!(alpha >= 0.0 && alpha < 1.0)) {
        throw std::invalid_argument("ema_update: alpha must be in [0, 1)");
    }
    auto blend = [alpha](DenseArray& t, const DenseArray& s) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            t.data[i] = alpha * t.data[i] + (1.0 - alpha) * s.data[i];
        }
    };
    blend(teacher.w1, student.w1);
    blend(teacher.b1, student.b1);
    blend(teacher.w2, student.w2);
    blend(teacher.b2, student.b2);
}

OptimizerState OptimizerState::init(const SegModel& model, const OptimizerSettings& s) {
    OptimizerState st;
    st.settings = s;
    st.m = ParamGrads::zeros_like(model);
    st.v = ParamGrads::zeros_like(model);
    return st;
}

double OptimizerState::lr_scale() const {
    if (settings.warmup <= 0) return 1.0;
    return std::min(1.0, static_cast<double>(step + 1) / settings.warmup);
}

void optimizer_step(OptimizerState& state, SegModel& model, const ParamGrads& grads) {
    if (!grads.all_finite()) {
        throw DivergenceError("optimizer_step: non-finite gradient");
    }
    state.step++;
    const auto& s = state.settings;
    const double t = static_cast<double>(state.step);
    const double scale = s.warmup > 0 ? std::min(1.0, t / s.warmup) : 1.0;
    const double bc1 = 1.0 - std::pow(s.beta1, t);
    const double bc2 = 1.0 - std::pow(s.beta2, t);

    auto update = [&](DenseArray& p, DenseArray& m, DenseArray& v, const DenseArray& g,
                      double base_lr) {
        const double lr = base_lr * scale;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m.data[i] = s.beta1 * m.data[i] + (1.0 - s.beta1) * g.data[i];
            v.data[i] = s.beta2 * v.data[i] + (1.0 - s.beta2) * g.data[i] * g.data[i];
            const double m_hat = m.data[i] / bc1;
            const double v_hat = v.data[i] / bc2;
            p.data[i] -= lr * (m_hat / (std::sqrt(v_hat) + s.eps) + s.weight_decay * p.data[i]);
        }
    };
    update(model.w1, state.m.w1, state.v.w1, grads.w1, s.lr_encoder);
    update(model.b1, state.m.b1, state.v.b1, grads.b1, s.lr_encoder);
    update(model.w2, state.m.w2, state.v.w2, grads.w2, s.lr_decoder);
    update(model.b2, state.m.b2, state.v.b2, grads.b2, s.lr_decoder);

    if (!model.w1.all_finite() || !model.b1.all_finite() || !model.w2.all_finite() ||
        !model.b2.all_finite()) {
        throw DivergenceError("optimizer_step: non-finite parameter after update");
    }
}

DenseArray PretrainedExtractor::forward(const DenseArray& feats) const {
    if (feats.shape.size() != 2 || feats.shape[1] != static_cast<std::size_t>(d_in)) {
        throw std::invalid_argument("PretrainedExtractor::forward: features must be {P, d_in}");
    }
    const std::size_t p_count = feats.shape[0];
    DenseArray out({p_count, static_cast<std::size_t>(d_out)});
    for (std::size_t p = 0; p < p_count; ++p) {
        const double* f = &feats.data[p * d_in];
        double* o = &out.data[p * d_out];
        for (int j = 0; j < d_out; ++j) o[j] = b1.data[j];
        for (int i = 0; i < d_in; ++i) {
            const double fi = f[i];
            const double* w = &w1.data[static_cast<std::size_t>(i) * d_out];
            for (int j = 0; j < d_out; ++j) o[j] += fi * w[j];
        }
        for (int j = 0; j < d_out; ++j) o[j] = o[j] > 0.0 ? o[j] : 0.0;
    }
    return out;
}

PretrainedExtractor pretrain_extractor(std::span<const LabeledImage> aux_images, int k, int d_hid,
                                       ExtractorMode mode, const PretrainSettings& settings,
                                       std::uint64_t seed) {
    Rng rng(Rng::splitmix64(seed) ^ 0x455850524554524eULL);
    SegModel net = SegModel::init(kFeatureDim, d_hid, k, rng);

    if (mode == ExtractorMode::Auxiliary) {
        if (aux_images.empty()) {
            throw std::invalid_argument("pretrain_extractor: auxiliary mode needs images");
        }
        OptimizerState opt = OptimizerState::init(net, settings.optim);
        std::vector<DenseArray> feats;
        feats.reserve(aux_images.size());
        for (const auto& img : aux_images) feats.push_back(featurize(img));

        for (int it = 0; it < settings.iterations; ++it) {
            ParamGrads grads = ParamGrads::zeros_like(net);
            double inv_batch = 1.0 / settings.batch_size;
            for (int b = 0; b < settings.batch_size; ++b) {
                const auto idx = static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(aux_images.size()) - 1));
                auto fr = forward(net, feats[idx]);
                auto probs = num::softmax(fr.logits, 1);
                auto ce = num::mean_cross_entropy(probs, aux_images[idx].labels);
                for (auto& v : ce.grad_logits.data) v *= inv_batch;
                grads.accumulate(backward(net, feats[idx], fr.neck, ce.grad_logits, {}));
            }
            optimizer_step(opt, net, grads);
        }
    }

    PretrainedExtractor ex;
    ex.d_in = net.d_in;
    ex.d_out = net.d_hid;
    ex.w1 = net.w1;
    ex.b1 = net.b1;
    ex.provenance = mode;
    return ex;
}

namespace {

constexpr char kCkptMagic[4] = {'O', 'M', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& bytes, std::size_t& pos, const std::string& path,
                      const std::string& what) {
    if (pos + 4 > bytes.size()) {
        throw FormatError(path + ": truncated while reading " + what + " at byte offset " +
                          std::to_string(pos));
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[pos + i])) << (8 * i);
    }
    pos += 4;
    return v;
}

double get_f64(const std::string& bytes, std::size_t& pos, const std::string& path,
               const std::string& what) {
    if (pos + 8 > bytes.size()) {
        throw FormatError(path + ": truncated while reading " + what + " at byte offset " +
                          std::to_string(pos));
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes[pos + i])) << (8 * i);
    }
    pos += 8;
    return std::bit_cast<double>(v);
}

}  // namespace

void save_checkpoint(const std::string& path, const SegModel& model) {
    std::string out;
    out.append(kCkptMagic, 4);
    put_u32(out, kCkptVersion);
    put_u32(out, static_cast<std::uint32_t>(model.d_in));
    put_u32(out, static_cast<std::uint32_t>(model.d_hid));
    put_u32(out, static_cast<std::uint32_t>(model.k));
    for (const auto* arr : {&model.w1, &model.b1, &model.w2, &model.b2}) {
        for (double v : arr->data) put_f64(out, v);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError(path + ": cannot open for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

SegModel load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError(path + ": cannot open");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0) {
        throw FormatError(path + ": bad magic at byte offset 0");
    }
    std::size_t pos = 4;
    const std::uint32_t version = get_u32(bytes, pos, path, "version");
    if (version != kCkptVersion) {
        throw FormatError(path + ": unsupported version " + std::to_string(version) +
                          " at byte offset 4");
    }
    SegModel m;
    m.d_in = static_cast<int>(get_u32(bytes, pos, path, "d_in"));
    m.d_hid = static_cast<int>(get_u32(bytes, pos, path, "d_hid"));
    m.k = static_cast<int>(get_u32(bytes, pos, path, "k"));
    if (m.d_in < 1 || m.d_hid < 1 || m.k < 2 || m.d_in > 4096 || m.d_hid > 65536 || m.k > 254) {
        throw FormatError(path + ": implausible dimensions in header");
    }
    m.w1 = DenseArray({static_cast<std::size_t>(m.d_in), static_cast<std::size_t>(m.d_hid)});
    m.b1 = DenseArray({static_cast<std::size_t>(m.d_hid)});
    m.w2 = DenseArray({static_cast<std::size_t>(m.d_hid), static_cast<std::size_t>(m.k)});
    m.b2 = DenseArray({static_cast<std::size_t>(m.k)});
    for (auto* arr : {&m.w1, &m.b1, &m.w2, &m.b2}) {
        for (auto& v : arr->data) v = get_f64(bytes, pos, path, "parameters");
    }
    if (pos != bytes.size()) {
        throw FormatError(path + ": trailing bytes at offset " + std::to_string(pos));
    }
    return m;
}

}  // namespace omuda::model
