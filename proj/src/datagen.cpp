#include "omuda/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "omuda/common.hpp"

namespace omuda {

bool ClassPartition::is_foreground(int cls) const {
    return std::find(foreground.begin(), foreground.end(), cls) != foreground.end();
}

void ClassPartition::validate(int k) const {
    if (foreground.empty() || background.empty()) {
        throw ConfigError("class partition: foreground and background must both be non-empty");
    }
    std::set<int> seen;
    for (int c : foreground) {
        if (c < 0 || c >= k) throw ConfigError("class partition: foreground index out of range");
        if (!seen.insert(c).second) throw ConfigError("class partition: duplicate class index");
    }
    for (int c : background) {
        if (c < 0 || c >= k) throw ConfigError("class partition: background index out of range");
        if (!seen.insert(c).second) throw ConfigError("class partition: duplicate class index");
    }
    if (static_cast<int>(seen.size()) != k) {
        throw ConfigError("class partition: union must cover all classes");
    }
}

std::string domain_name(Domain d) { return d == Domain::Source ? "source" : "target"; }

Domain domain_from_name(const std::string& name) {
    if (name == "source") return Domain::Source;
    if (name == "target") return Domain::Target;
    throw ConfigError("unknown domain name: " + name);
}

void SceneConfig::validate() const {
    if (k < 2 || k > 254) throw ConfigError("scene.k must be in [2, 254]");
    if (h < 32 || w < 32) throw ConfigError("scene.h and scene.w must be >= 32");
    if (static_cast<int>(class_names.size()) != k) {
        throw ConfigError("scene.class_names must have exactly k entries");
    }
    if (static_cast<int>(rarity.size()) != k) {
        throw ConfigError("scene.rarity must have exactly k entries");
    }
    for (double r : rarity) {
        if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("scene.rarity entries must be >= 0");
    }
    partition.validate(k);
    double bg_total = 0.0;
    for (int c : partition.background) bg_total += rarity[c];
    if (!(bg_total > 0.0)) {
        throw ConfigError("scene.rarity: background classes need positive total weight");
    }
    if (!(shift.brightness_scale > 0.0)) {
        throw ConfigError("scene.shift.brightness_scale must be > 0");
    }
    if (shift.noise_sigma < 0.0) throw ConfigError("scene.shift.noise_sigma must be >= 0");
}

SceneConfig SceneConfig::default_config() {
    SceneConfig c;
    c.k = 8;
    c.class_names = {"sky", "road", "building", "vegetation", "car", "person", "sign", "pole"};
    c.partition.background = {0, 1, 2, 3};
    c.partition.foreground = {4, 5, 6, 7};
    c.h = 64;
    c.w = 64;
    c.rarity = {0.30, 0.30, 0.20, 0.12, 0.04, 0.02, 0.015, 0.005};
    return c;
}

namespace datagen {
namespace {

constexpr std::uint64_t kLayoutTag = 0x4c41594f55545f31ULL;
constexpr std::uint64_t kTextureTag = 0x544558545552455fULL;

struct Color {
    double r, g, b;
};

Color class_base_color(int cls) {
    static const Color table[8] = {
        {120, 185, 235},  // sky-like blue
        {95, 95, 100},    // asphalt gray
        {150, 115, 85},   // masonry brown
        {70, 140, 60},    // foliage green
        {200, 50, 45},    // vehicle red
        {235, 180, 130},  // person tan
        {240, 200, 40},   // sign yellow
        {165, 165, 175},  // pole gray
    };
    if (cls < 8) return table[cls];
    // Extra classes get a golden-angle hue wheel so any K works.
    const double hue = std::fmod(cls * 137.50776405, 360.0) * (M_PI / 180.0);
    return {140 + 90 * std::cos(hue), 140 + 90 * std::cos(hue - 2.094), 140 + 90 * std::cos(hue + 2.094)};
}

double class_texture_amplitude(int cls) {
    static const double table[8] = {4, 8, 14, 22, 10, 10, 8, 8};
    return cls < 8 ? table[cls] : 10.0;
}

// Largest-remainder allocation of `total` units proportional to weights.
// Zero-weight entries receive exactly zero units.
std::vector<int> allocate_units(int total, std::span<const double> weights) {
    const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<int> units(weights.size(), 0);
    if (!(sum > 0.0) || total <= 0) return units;
    std::vector<std::pair<double, std::size_t>> fractions;
    int assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double ideal = total * weights[i] / sum;
        units[i] = static_cast<int>(std::floor(ideal));
        assigned += units[i];
        fractions.emplace_back(ideal - units[i], i);
    }
    std::sort(fractions.begin(), fractions.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (int r = 0; r < total - assigned; ++r) units[fractions[r % fractions.size()].second]++;
    return units;
}

std::vector<double> jittered(std::span<const double> w, Rng& rng, double amount) {
    std::vector<double> out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        out[i] = w[i] > 0.0 ? w[i] * (1.0 + amount * rng.uniform(-1.0, 1.0)) : 0.0;
    }
    return out;
}

void paint_background(std::vector<std::uint8_t>& labels, const SceneConfig& cfg, Rng& layout) {
    const auto& bg = cfg.partition.background;
    const int h = cfg.h, w = cfg.w;
    std::vector<double> q(bg.size());
    for (std::size_t i = 0; i < bg.size(); ++i) q[i] = cfg.rarity[bg[i]];

    if (bg.size() == 1) {
        std::fill(labels.begin(), labels.end(), static_cast<std::uint8_t>(bg[0]));
        return;
    }

    const auto rows = allocate_units(h, jittered(q, layout, 0.2));
    auto fill_rows = [&](int r0, int r1, int cls) {
        for (int r = r0; r < r1; ++r) {
            std::fill_n(labels.begin() + static_cast<std::size_t>(r) * w, w,
                        static_cast<std::uint8_t>(cls));
        }
    };

    if (bg.size() == 2) {
        fill_rows(0, rows[0], bg[0]);
        fill_rows(rows[0], h, bg[1]);
        return;
    }

    // First class: band at the top. Second class: band at the bottom.
    // Remaining classes: column blocks in the middle zone, re-split per
    // horizontal sub-band so the middle looks blocky.
    const int top = rows[0];
    const int bottom = rows[1];
    fill_rows(0, top, bg[0]);
    fill_rows(h - bottom, h, bg[1]);

    std::vector<double> mid_q(q.begin() + 2, q.end());
    std::vector<int> mid_classes(bg.begin() + 2, bg.end());
    int r = top;
    const int mid_end = h - bottom;
    int band_index = 0;
    while (r < mid_end) {
        const int band_h = std::min(mid_end - r, static_cast<int>(layout.uniform_int(6, 14)));
        const auto cols = allocate_units(w, jittered(mid_q, layout, 0.2));
        int c = 0;
        for (std::size_t i = 0; i < mid_classes.size(); ++i) {
            // Rotate which class comes first per sub-band.
            const std::size_t idx = (i + band_index) % mid_classes.size();
            for (int cc = c; cc < c + cols[idx]; ++cc) {
                for (int rr = r; rr < r + band_h; ++rr) {
                    labels[static_cast<std::size_t>(rr) * w + cc] =
                        static_cast<std::uint8_t>(mid_classes[idx]);
                }
            }
            c += cols[idx];
        }
        // Any unassigned columns (all-zero middle weights) fall back to the
        // top band's class.
        for (int cc = c; cc < w; ++cc) {
            for (int rr = r; rr < r + band_h; ++rr) {
                labels[static_cast<std::size_t>(rr) * w + cc] = static_cast<std::uint8_t>(bg[0]);
            }
        }
        r += band_h;
        band_index++;
    }
}

enum class ShapeKind { WideRect, Ellipse, Square, Pole };

struct ShapeSpec {
    ShapeKind kind;
    double nominal_w, nominal_h;
};

ShapeSpec foreground_shape(std::size_t position_in_list) {
    static const ShapeSpec table[4] = {
        {ShapeKind::WideRect, 10.0, 7.0},
        {ShapeKind::Ellipse, 5.0, 9.0},
        {ShapeKind::Square, 5.0, 5.0},
        {ShapeKind::Pole, 2.0, 10.0},
    };
    return table[position_in_list % 4];
}

void paint_foreground(std::vector<std::uint8_t>& labels, const SceneConfig& cfg, Rng& layout) {
    const int h = cfg.h, w = cfg.w;
    const double total_weight = std::accumulate(cfg.rarity.begin(), cfg.rarity.end(), 0.0);
    const double sx = w / 64.0, sy = h / 64.0;

    std::vector<std::size_t> painted(cfg.k, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) painted[labels[i]]++;

    for (std::size_t pos = 0; pos < cfg.partition.foreground.size(); ++pos) {
        const int cls = cfg.partition.foreground[pos];
        const double target_px = cfg.rarity[cls] / total_weight * h * w;
        if (!(target_px > 0.0)) continue;
        const ShapeSpec spec = foreground_shape(pos);
        double nominal_area = spec.nominal_w * sx * spec.nominal_h * sy;
        if (spec.kind == ShapeKind::Ellipse) nominal_area *= M_PI / 4.0;
        nominal_area = std::max(1.0, nominal_area);

        int placed = 0;
        while (static_cast<double>(target_px) - static_cast<double>(painted[cls]) >
                   0.5 * nominal_area &&
               placed < 64) {
            const int ow = std::clamp(
                static_cast<int>(std::lround(spec.nominal_w * sx * layout.uniform(0.75, 1.25))), 1,
                w - 1);
            const int oh = std::clamp(
                static_cast<int>(std::lround(spec.nominal_h * sy * layout.uniform(0.75, 1.25))), 1,
                h - 1);
            const int x0 = static_cast<int>(layout.uniform_int(0, w - ow));
            const int y0 = static_cast<int>(layout.uniform_int(0, h - oh));
            for (int y = y0; y < y0 + oh; ++y) {
                for (int x = x0; x < x0 + ow; ++x) {
                    if (spec.kind == ShapeKind::Ellipse) {
                        const double dx = (x - (x0 + 0.5 * (ow - 1))) / (0.5 * ow);
                        const double dy = (y - (y0 + 0.5 * (oh - 1))) / (0.5 * oh);
                        if (dx * dx + dy * dy > 1.0) continue;
                    }
                    auto& cell = labels[static_cast<std::size_t>(y) * w + x];
                    painted[cell]--;
                    cell = static_cast<std::uint8_t>(cls);
                    painted[cls]++;
                }
            }
            placed++;
        }
    }
}

void paint_colors(LabeledImage& img, const SceneConfig& cfg, Rng& texture) {
    const int h = img.h, w = img.w;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int cls = img.labels[static_cast<std::size_t>(y) * w + x];
            Color c = class_base_color(cls);
            const double amp = class_texture_amplitude(cls);
            const double jitter = texture.uniform(-amp, amp);
            c.r += jitter;
            c.g += jitter;
            c.b += jitter;
            // Light structural patterns so local statistics carry signal.
            if (cls == 0) {
                const double lift = 20.0 * (1.0 - static_cast<double>(y) / h);
                c.r += lift * 0.4;
                c.g += lift * 0.6;
                c.b += lift;
            } else if (cls == 2) {
                const bool brick = ((y / 4) + (x / 8)) % 2 == 0;
                const double d = brick ? 6.0 : -8.0;
                c.r += d;
                c.g += d;
                c.b += d;
            } else if (cls == 3) {
                const double leaf = texture.uniform(-12.0, 12.0);
                c.g += leaf;
            }
            const std::size_t base = (static_cast<std::size_t>(y) * w + x) * 3;
            img.rgb[base + 0] = static_cast<std::uint8_t>(std::clamp(c.r, 0.0, 255.0));
            img.rgb[base + 1] = static_cast<std::uint8_t>(std::clamp(c.g, 0.0, 255.0));
            img.rgb[base + 2] = static_cast<std::uint8_t>(std::clamp(c.b, 0.0, 255.0));
        }
    }
}

void apply_domain_shift(LabeledImage& img, const DomainShiftParams& shift, Rng& noise) {
    const double theta = shift.hue_shift * M_PI / 180.0;
    const double ca = std::cos(theta), sa = std::sin(theta);
    const double k1 = ca + (1.0 - ca) / 3.0;
    const double k2 = (1.0 - ca) / 3.0 - sa / std::sqrt(3.0);
    const double k3 = (1.0 - ca) / 3.0 + sa / std::sqrt(3.0);
    const double m[3][3] = {{k1, k2, k3}, {k3, k1, k2}, {k2, k3, k1}};

    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
        double in[3] = {static_cast<double>(img.rgb[p * 3 + 0]),
                        static_cast<double>(img.rgb[p * 3 + 1]),
                        static_cast<double>(img.rgb[p * 3 + 2])};
        for (int ch = 0; ch < 3; ++ch) {
            double v = m[ch][0] * in[0] + m[ch][1] * in[1] + m[ch][2] * in[2];
            v *= shift.brightness_scale;
            if (shift.noise_sigma > 0.0) v += noise.normal(0.0, shift.noise_sigma);
            img.rgb[p * 3 + ch] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
}

}  // namespace

LabeledImage generate_scene(const SceneConfig& config, Domain domain, std::uint64_t seed) {
    config.validate();
    LabeledImage img;
    img.h = config.h;
    img.w = config.w;
    img.rgb.assign(img.pixel_count() * 3, 0);
    img.labels.assign(img.pixel_count(), 0);

    // The layout stream is shared by both domains so that source and target
    // scenes with equal seeds carry identical label planes; appearance draws
    // come from a separate stream that the target offsets.
    Rng layout(Rng::splitmix64(seed) ^ kLayoutTag);
    std::uint64_t tex_seed = Rng::splitmix64(seed) ^ kTextureTag;
    if (domain == Domain::Target) {
        std::uint64_t off = static_cast<std::uint64_t>(config.shift.texture_seed_offset);
        tex_seed ^= Rng::splitmix64(off);
    }
    Rng texture(tex_seed);

    paint_background(img.labels, config, layout);
    paint_foreground(img.labels, config, layout);
    paint_colors(img, config, texture);
    if (domain == Domain::Target) {
        apply_domain_shift(img, config.shift, texture);
    }
    return img;
}

std::vector<LabeledImage> generate_dataset(const SceneConfig& config, Domain domain,
                                           std::size_t n, std::uint64_t seed) {
    std::vector<LabeledImage> images;
    images.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        // Per-image stream from (seed, index): order- and worker-independent.
        std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (i + 1);
        images.push_back(generate_scene(config, domain, Rng::splitmix64(x)));
    }
    return images;
}

std::vector<LabeledImage> target_view(std::span<const LabeledImage> images) {
    std::vector<LabeledImage> out(images.begin(), images.end());
    for (auto& img : out) {
        std::fill(img.labels.begin(), img.labels.end(), kIgnoreLabel);
    }
    return out;
}

namespace {

constexpr char kMagic[4] = {'O', 'M', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u16(std::string& out, std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

    std::uint64_t offset() const { return pos_; }

    const std::uint8_t* take(std::size_t n, const std::string& what) {
        if (pos_ + n > bytes_.size()) {
            throw FormatError(path_ + ": truncated while reading " + what + " at byte offset " +
                              std::to_string(pos_) + " (need " + std::to_string(n) + " bytes, " +
                              std::to_string(bytes_.size() - pos_) + " left)");
        }
        const auto* p = reinterpret_cast<const std::uint8_t*>(bytes_.data() + pos_);
        pos_ += n;
        return p;
    }

    std::uint32_t u32(const std::string& what) {
        const auto* p = take(4, what);
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }
    std::uint16_t u16(const std::string& what) {
        const auto* p = take(2, what);
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }
    std::uint8_t u8(const std::string& what) { return take(1, what)[0]; }

    bool exhausted() const { return pos_ == bytes_.size(); }

private:
    const std::string& bytes_;
    std::string path_;
    std::uint64_t pos_ = 0;
};

nlohmann::json shift_to_json(const DomainShiftParams& s) {
    return {{"hue_shift", s.hue_shift},
            {"brightness_scale", s.brightness_scale},
            {"noise_sigma", s.noise_sigma},
            {"texture_seed_offset", s.texture_seed_offset}};
}

DomainShiftParams shift_from_json(const nlohmann::json& j) {
    DomainShiftParams s;
    s.hue_shift = j.at("hue_shift").get<double>();
    s.brightness_scale = j.at("brightness_scale").get<double>();
    s.noise_sigma = j.at("noise_sigma").get<double>();
    s.texture_seed_offset = j.at("texture_seed_offset").get<std::int64_t>();
    return s;
}

}  // namespace

void write_dataset(const std::string& dir, const Dataset& dataset) {
    dataset.config.validate();
    std::filesystem::create_directories(dir);

    nlohmann::json meta = {
        {"k", dataset.config.k},
        {"class_names", dataset.config.class_names},
        {"foreground", dataset.config.partition.foreground},
        {"background", dataset.config.partition.background},
        {"h", dataset.config.h},
        {"w", dataset.config.w},
        {"n", dataset.images.size()},
        {"domain", domain_name(dataset.domain)},
        {"shift", shift_to_json(dataset.config.shift)},
        {"rarity", dataset.config.rarity},
        {"seed", dataset.seed},
    };
    {
        std::ofstream mf(std::filesystem::path(dir) / "meta.json", std::ios::binary);
        if (!mf) throw FormatError(dir + ": cannot open meta.json for writing");
        mf << meta.dump(2) << "\n";
    }

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(dataset.images.size()));
    put_u16(out, static_cast<std::uint16_t>(dataset.config.h));
    put_u16(out, static_cast<std::uint16_t>(dataset.config.w));
    out.push_back(static_cast<char>(dataset.config.k));
    for (const auto& img : dataset.images) {
        if (img.h != dataset.config.h || img.w != dataset.config.w) {
            throw std::invalid_argument("write_dataset: image size differs from config");
        }
        out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
        out.append(reinterpret_cast<const char*>(img.labels.data()), img.labels.size());
    }
    std::ofstream bf(std::filesystem::path(dir) / "images.bin", std::ios::binary);
    if (!bf) throw FormatError(dir + ": cannot open images.bin for writing");
    bf.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Dataset read_dataset(const std::string& dir) {
    const auto meta_path = std::filesystem::path(dir) / "meta.json";
    std::ifstream mf(meta_path, std::ios::binary);
    if (!mf) throw FormatError(meta_path.string() + ": cannot open");
    nlohmann::json meta;
    try {
        mf >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(meta_path.string() + ": invalid JSON: " + e.what());
    }

    Dataset ds;
    try {
        ds.config.k = meta.at("k").get<int>();
        ds.config.class_names = meta.at("class_names").get<std::vector<std::string>>();
        ds.config.partition.foreground = meta.at("foreground").get<std::vector<int>>();
        ds.config.partition.background = meta.at("background").get<std::vector<int>>();
        ds.config.h = meta.at("h").get<int>();
        ds.config.w = meta.at("w").get<int>();
        ds.config.shift = shift_from_json(meta.at("shift"));
        ds.config.rarity = meta.at("rarity").get<std::vector<double>>();
        ds.domain = domain_from_name(meta.at("domain").get<std::string>());
        ds.seed = meta.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(meta_path.string() + ": missing or malformed field: " + e.what());
    }
    ds.config.validate();

    const auto bin_path = std::filesystem::path(dir) / "images.bin";
    std::ifstream bf(bin_path, std::ios::binary);
    if (!bf) throw FormatError(bin_path.string() + ": cannot open");
    std::string bytes((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

    Reader r(bytes, bin_path.string());
    const auto* magic = r.take(4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(bin_path.string() + ": bad magic at byte offset 0");
    }
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw FormatError(bin_path.string() + ": unsupported version " + std::to_string(version) +
                          " at byte offset 4");
    }
    const std::uint32_t n = r.u32("image count");
    const int h = r.u16("height");
    const int w = r.u16("width");
    const int k = r.u8("class count");
    if (n != meta.at("n").get<std::uint32_t>() || h != ds.config.h || w != ds.config.w ||
        k != ds.config.k) {
        throw FormatError(bin_path.string() + ": header disagrees with meta.json");
    }

    const std::size_t px = static_cast<std::size_t>(h) * w;
    ds.images.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        LabeledImage img;
        img.h = h;
        img.w = w;
        const auto* rgb = r.take(px * 3, "rgb plane of image " + std::to_string(i));
        img.rgb.assign(rgb, rgb + px * 3);
        const auto* labels = r.take(px, "label plane of image " + std::to_string(i));
        img.labels.assign(labels, labels + px);
        for (std::size_t p = 0; p < px; ++p) {
            if (img.labels[p] != kIgnoreLabel && img.labels[p] >= k) {
                throw FormatError(bin_path.string() + ": label out of range in image " +
                                  std::to_string(i));
            }
        }
        ds.images.push_back(std::move(img));
    }
    if (!r.exhausted()) {
        throw FormatError(bin_path.string() + ": trailing bytes at offset " +
                          std::to_string(r.offset()));
    }
    return ds;
}

}  // namespace datagen
}  // namespace omuda
