#include "omuda/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

#include "omuda/cam.hpp"
#include "omuda/cdm.hpp"
#include "omuda/fdm.hpp"
#include "omuda/model.hpp"

namespace omuda::gradcheck {

namespace {

constexpr int kSide = 8;
constexpr int kClasses = 8;
constexpr int kBatch = 3;

LabeledImage random_image(Rng& rng, bool with_labels) {
    LabeledImage img;
    img.h = kSide;
    img.w = kSide;
    img.rgb.resize(img.pixel_count() * 3);
    img.labels.resize(img.pixel_count());
    for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    for (auto& v : img.labels) {
        v = with_labels ? static_cast<std::uint8_t>(rng.uniform_int(0, kClasses - 1)) : 255;
    }
    return img;
}

struct Fixture {
    ClassPartition partition;
    trainer::TrainConfig cfg;
    model::SegModel base;
    model::SegModel teacher;
    model::PretrainedExtractor extractor;
    cdm::ReliabilityState rel;

    std::vector<LabeledImage> source;
    std::vector<DenseArray> source_feats;
    std::vector<fdm::ForegroundEmbedding> pre_embeddings;

    std::vector<LabeledImage> target;
    std::vector<DenseArray> target_feats;
    std::vector<std::vector<std::uint8_t>> pseudo;
    std::vector<DenseArray> masked_feats;

    std::vector<std::uint8_t> src_labels_stacked;
    std::vector<std::uint8_t> pseudo_stacked;
};

Fixture build_fixture(const trainer::TrainConfig& cfg, std::uint64_t seed) {
    Fixture fx;
    fx.cfg = cfg;
    fx.partition.background = {0, 1, 2, 3};
    fx.partition.foreground = {4, 5, 6, 7};

    Rng rng(Rng::splitmix64(seed) ^ 0x4752414443484bULL);
    fx.base = model::SegModel::init(model::kFeatureDim, cfg.d_hid, kClasses, rng);
    fx.teacher = model::SegModel::init(model::kFeatureDim, cfg.d_hid, kClasses, rng);

    Rng ex_rng = rng.fork(11);
    auto ex_model = model::SegModel::init(model::kFeatureDim, cfg.d_hid, kClasses, ex_rng);
    fx.extractor.d_in = ex_model.d_in;
    fx.extractor.d_out = ex_model.d_hid;
    fx.extractor.w1 = ex_model.w1;
    fx.extractor.b1 = ex_model.b1;

    fx.rel = cdm::ReliabilityState::init(kClasses, cfg.cdm_decay, 0.5);
    for (auto& b : fx.rel.beta) b = rng.uniform(0.2, 0.8);

    for (int i = 0; i < kBatch; ++i) {
        fx.source.push_back(random_image(rng, true));
        fx.source_feats.push_back(model::featurize(fx.source.back()));
        auto ex_feats = fx.extractor.forward(fx.source_feats.back());
        auto emb = fdm::pool_foreground(ex_feats, fx.source.back().labels, fx.partition,
                                        cfg.n_min_fg, i);
        if (!emb.has_value()) {
            throw std::runtime_error("gradcheck fixture: source image lacks foreground pixels");
        }
        fx.pre_embeddings.push_back(*emb);
        const auto& labels = fx.source.back().labels;
        fx.src_labels_stacked.insert(fx.src_labels_stacked.end(), labels.begin(), labels.end());
    }

    Rng mask_rng = rng.fork(13);
    for (int i = 0; i < kBatch; ++i) {
        fx.target.push_back(random_image(rng, false));
        fx.target_feats.push_back(model::featurize(fx.target.back()));
        auto teacher_fr = model::forward(fx.teacher, fx.target_feats.back());
        fx.pseudo.push_back(cdm::argmax_labels(teacher_fr.logits));
        fx.pseudo_stacked.insert(fx.pseudo_stacked.end(), fx.pseudo.back().begin(),
                                 fx.pseudo.back().end());

        auto back = cam::make_block_mask(kSide, kSide, 4, cfg.mask_ratio, mask_rng);
        auto fore = cam::make_block_mask(kSide, kSide, 2, cfg.mask_ratio, mask_rng);
        auto rgb = cam::combine_masked_image(fx.target.back(), fx.pseudo.back(), fx.partition,
                                             back, fore);
        fx.masked_feats.push_back(model::featurize_rgb(kSide, kSide, rgb));
    }
    return fx;
}

constexpr std::size_t kPx = static_cast<std::size_t>(kSide) * kSide;

DenseArray stack_probs(const model::SegModel& m, std::span<const DenseArray> feats,
                       std::vector<model::ForwardResult>* frs) {
    DenseArray stacked({feats.size() * kPx, static_cast<std::size_t>(m.k)});
    for (std::size_t i = 0; i < feats.size(); ++i) {
        auto fr = model::forward(m, feats[i]);
        auto probs = num::softmax(fr.logits, 1);
        std::copy(probs.data.begin(), probs.data.end(),
                  stacked.data.begin() + i * kPx * m.k);
        if (frs) frs->push_back(std::move(fr));
    }
    return stacked;
}

DenseArray slice(const DenseArray& stacked, std::size_t image, std::size_t cols) {
    DenseArray out({kPx, cols});
    std::copy_n(stacked.data.begin() + image * kPx * cols, kPx * cols, out.data.begin());
    return out;
}

// Per-term loss + analytic parameter gradient evaluators. `grads == nullptr`
// computes the loss only (for the finite-difference side).

double eval_l_s(const Fixture& fx, const model::SegModel& m, model::ParamGrads* grads) {
    std::vector<model::ForwardResult> frs;
    auto stacked = stack_probs(m, fx.source_feats, &frs);
    auto ce = num::mean_cross_entropy(stacked, fx.src_labels_stacked);
    if (grads) {
        for (int i = 0; i < kBatch; ++i) {
            auto d_logits = slice(ce.grad_logits, i, m.k);
            grads->accumulate(model::backward(m, fx.source_feats[i], frs[i].neck, d_logits, {}));
        }
    }
    return ce.loss;
}

// Relational KD pieces; `use_pairs` / `use_triplets` select L_D, L_A or both.
double eval_kd(const Fixture& fx, const model::SegModel& m, bool use_pairs, bool use_triplets,
               model::ParamGrads* grads, double scale = 1.0) {
    std::vector<model::ForwardResult> frs(kBatch);
    std::vector<fdm::ForegroundEmbedding> neck_embs;
    for (int i = 0; i < kBatch; ++i) {
        frs[i] = model::forward(m, fx.source_feats[i]);
        auto emb = fdm::pool_foreground(frs[i].neck, fx.source[i].labels, fx.partition,
                                        fx.cfg.n_min_fg, i);
        if (!emb.has_value()) throw std::runtime_error("gradcheck: missing neck embedding");
        neck_embs.push_back(*emb);
    }
    auto pre_stats = fdm::relational_stats(fx.pre_embeddings, fx.cfg.d_norm);
    auto neck_stats = fdm::relational_stats(neck_embs, fx.cfg.d_norm);
    if (!use_pairs) {
        pre_stats.pairs.clear();
        neck_stats.pairs.clear();
    }
    if (!use_triplets) {
        pre_stats.triplets.clear();
        neck_stats.triplets.clear();
    }
    auto kd = fdm::kd_loss(pre_stats, neck_stats);
    if (grads) {
        for (int i = 0; i < kBatch; ++i) {
            DenseArray d_neck({kPx, static_cast<std::size_t>(m.d_hid)});
            const double s = scale / neck_embs[i].fg_pixel_count;
            for (std::size_t p = 0; p < kPx; ++p) {
                if (!fx.partition.is_foreground(fx.source[i].labels[p])) continue;
                for (int j = 0; j < m.d_hid; ++j) {
                    d_neck.data[p * m.d_hid + j] += s * kd.grad_neck[i][j];
                }
            }
            grads->accumulate(model::backward(m, fx.source_feats[i], frs[i].neck, {}, d_neck));
        }
    }
    return kd.l_kd;
}

double eval_target_ce(const Fixture& fx, const model::SegModel& m,
                      std::span<const DenseArray> feats, model::ParamGrads* grads,
                      double scale = 1.0) {
    std::vector<model::ForwardResult> frs;
    auto stacked = stack_probs(m, feats, &frs);
    double loss;
    DenseArray grad_logits;
    if (fx.cfg.cdm_mode == trainer::CdmConfigMode::Off) {
        auto ce = num::mean_cross_entropy(stacked, fx.pseudo_stacked);
        loss = ce.loss;
        grad_logits = std::move(ce.grad_logits);
    } else {
        auto wl = cdm::weighted_loss(stacked, fx.pseudo_stacked, fx.rel,
                                     fx.cfg.cdm_mode == trainer::CdmConfigMode::Paper
                                         ? cdm::WeightingMode::Paper
                                         : cdm::WeightingMode::Inverted);
        loss = wl.loss;
        grad_logits = std::move(wl.grad_logits);
    }
    if (grads) {
        for (int i = 0; i < kBatch; ++i) {
            auto d_logits = slice(grad_logits, i, m.k);
            if (scale != 1.0) {
                for (auto& v : d_logits.data) v *= scale;
            }
            grads->accumulate(model::backward(m, feats[i], frs[i].neck, d_logits, {}));
        }
    }
    return loss;
}

double eval_l_total(const Fixture& fx, const model::SegModel& m, model::ParamGrads* grads) {
    double total = eval_l_s(fx, m, grads);
    if (fx.cfg.fdm_enabled && fx.cfg.lambda_kd > 0.0) {
        total += fx.cfg.lambda_kd * eval_kd(fx, m, true, true, grads, fx.cfg.lambda_kd);
    }
    total += eval_target_ce(fx, m, fx.target_feats, grads);
    if (fx.cfg.mask_strategy != trainer::MaskStrategy::None) {
        total += eval_target_ce(fx, m, fx.masked_feats, grads);
    }
    return total;
}

template <typename Eval>
SuiteEntry check_term(const std::string& name, const Fixture& fx, const Eval& eval, double step,
                      double tolerance) {
    model::SegModel work = fx.base;
    model::ParamGrads grads = model::ParamGrads::zeros_like(work);
    eval(fx, work, &grads);
    const auto analytic = grads.flatten();
    const auto params = fx.base.flatten();

    auto f = [&](std::span<const double> flat) {
        model::SegModel probe = fx.base;
        probe.unflatten(flat);
        return eval(fx, probe, nullptr);
    };
    SuiteEntry entry;
    entry.name = name;
    entry.report = num::finite_diff_check(f, params, analytic, step, tolerance);
    return entry;
}

}  // namespace

std::vector<SuiteEntry> run_suite(const trainer::TrainConfig& cfg, std::uint64_t seed,
                                  double step, double tolerance) {
    Fixture fx = build_fixture(cfg, seed);
    std::vector<SuiteEntry> suite;
    suite.push_back(check_term(
        "L_S", fx,
        [](const Fixture& f, const model::SegModel& m, model::ParamGrads* g) {
            return eval_l_s(f, m, g);
        },
        step, tolerance));
    suite.push_back(check_term(
        "L_T", fx,
        [](const Fixture& f, const model::SegModel& m, model::ParamGrads* g) {
            return eval_target_ce(f, m, f.target_feats, g);
        },
        step, tolerance));
    suite.push_back(check_term(
        "L_M", fx,
        [](const Fixture& f, const model::SegModel& m, model::ParamGrads* g) {
            return eval_target_ce(f, m, f.masked_feats, g);
        },
        step, tolerance));
    suite.push_back(check_term(
        "L_D", fx,
        [](const Fixture& f, const model::SegModel& m, model::ParamGrads* g) {
            return eval_kd(f, m, true, false, g);
        },
        step, tolerance));
    suite.push_back(check_term(
        "L_A", fx,
        [](const Fixture& f, const model::SegModel& m, model::ParamGrads* g) {
            return eval_kd(f, m, false, true, g);
        },
        step, tolerance));
    suite.push_back(check_term(
        "L_Total", fx,
        [](const Fixture& f, const model::SegModel& m, model::ParamGrads* g) {
            return eval_l_total(f, m, g);
        },
        step, tolerance));
    return suite;
}

}  // namespace omuda::gradcheck
