#include "omuda/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "omuda/common.hpp"

namespace omuda::trainer {

namespace {

constexpr std::uint64_t kInitTag = 0x494e495431ULL;
constexpr std::uint64_t kBatchTag = 0x4241544348ULL;
constexpr std::uint64_t kMaskTag = 0x4d41534b31ULL;

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n || failed.load()) break;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!failed.exchange(true)) error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const int count = static_cast<int>(std::min<std::size_t>(workers, n));
    pool.reserve(count);
    for (int t = 0; t < count; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

int resolve_workers(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::clamp(hw, 1u, 4u));
}

int scaled_block(int nominal, int h, int w) {
    const int px = std::max(1, static_cast<int>(std::lround(nominal * h / 64.0)));
    return std::min(px, std::min(h, w));
}

}  // namespace

void TrainConfig::validate() const {
    if (iterations < 0) throw ConfigError("train.iterations must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (fdm_enabled && lambda_kd > 0.0 && batch_size < 3) {
        throw ConfigError("train.batch_size must be >= 3 when fdm is enabled (angles need triplets)");
    }
    if (!(lambda_kd >= 0.0)) throw ConfigError("train.lambda_kd must be >= 0");
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("train.alpha must be in [0, 1)");
    if (eval_interval < 1) throw ConfigError("train.eval_interval must be >= 1");
    if (!(t_b > 0.0)) throw ConfigError("cam.t_b must be > 0");
    if (!(t_f > 0.0)) throw ConfigError("cam.t_f must be > 0");
    if (!(p_fg_branch >= 0.0 && p_fg_branch <= 1.0)) {
        throw ConfigError("cam.p_fg_branch must be in [0, 1]");
    }
    if (n_min < 1) throw ConfigError("cam.n_min must be >= 1");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) {
        throw ConfigError("cam.mask_ratio must be in [0, 1]");
    }
    if (block_fore < 1) throw ConfigError("cam.block_fore must be >= 1");
    if (block_back < 1) throw ConfigError("cam.block_back must be >= 1");
    if (!(cdm_decay >= 0.0 && cdm_decay < 1.0)) throw ConfigError("cdm.decay must be in [0, 1)");
    if (!(cdm_beta_init >= 0.0 && cdm_beta_init <= 1.0)) {
        throw ConfigError("cdm.beta_init must be in [0, 1]");
    }
    if (n_min_fg < 1) throw ConfigError("fdm.n_min_fg must be >= 1");
    if (pretrain_iterations < 1) throw ConfigError("fdm.pretrain_iterations must be >= 1");
    if (d_hid < 1) throw ConfigError("model.d_hid must be >= 1");
    if (!(optim.lr_encoder > 0.0)) throw ConfigError("optim.lr_encoder must be > 0");
    if (!(optim.lr_decoder > 0.0)) throw ConfigError("optim.lr_decoder must be > 0");
    if (optim.warmup < 0) throw ConfigError("optim.warmup must be >= 0");
    if (!(optim.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be >= 0");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0)) throw ConfigError("optim.beta1 must be in [0, 1)");
    if (!(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) throw ConfigError("optim.beta2 must be in [0, 1)");
    if (!(optim.eps > 0.0)) throw ConfigError("optim.eps must be > 0");
}

void Datasets::validate() const {
    auto check = [&](const datagen::Dataset& ds, const std::string& name, bool allow_empty) {
        if (ds.images.empty() && !allow_empty) {
            throw ConfigError("dataset '" + name + "' is empty");
        }
        if (ds.config.k != source.config.k || ds.config.h != source.config.h ||
            ds.config.w != source.config.w) {
            throw ConfigError("dataset '" + name + "' disagrees with source on k/h/w");
        }
    };
    if (source.images.empty()) throw ConfigError("dataset 'source' is empty");
    check(target, "target", false);
    check(target_eval, "target_eval", false);
    check(aux, "aux", true);
}

Datasets load_datasets(const std::string& dir) {
    namespace fs = std::filesystem;
    Datasets d;
    d.source = datagen::read_dataset((fs::path(dir) / "source").string());
    d.target = datagen::read_dataset((fs::path(dir) / "target").string());
    d.target_eval = datagen::read_dataset((fs::path(dir) / "target_eval").string());
    const auto aux_dir = fs::path(dir) / "aux";
    if (fs::exists(aux_dir / "meta.json")) {
        d.aux = datagen::read_dataset(aux_dir.string());
    } else {
        d.aux.config = d.source.config;
    }
    d.validate();
    return d;
}

TrainContext prepare_context(const TrainConfig& cfg, const Datasets& data) {
    cfg.validate();
    data.validate();

    TrainContext ctx;
    ctx.data = &data;
    ctx.workers = resolve_workers(cfg.workers);
    const auto& scene = data.source.config;
    ctx.block_fore_px = scaled_block(cfg.block_fore, scene.h, scene.w);
    ctx.block_back_px = scaled_block(cfg.block_back, scene.h, scene.w);

    ctx.target_images = datagen::target_view(data.target.images);

    ctx.source_feats.resize(data.source.images.size());
    parallel_for(data.source.images.size(), ctx.workers, [&](std::size_t i) {
        ctx.source_feats[i] = model::featurize(data.source.images[i]);
    });
    ctx.target_feats.resize(ctx.target_images.size());
    parallel_for(ctx.target_images.size(), ctx.workers, [&](std::size_t i) {
        ctx.target_feats[i] = model::featurize(ctx.target_images[i]);
    });
    ctx.eval_feats.resize(data.target_eval.images.size());
    parallel_for(data.target_eval.images.size(), ctx.workers, [&](std::size_t i) {
        ctx.eval_feats[i] = model::featurize(data.target_eval.images[i]);
    });

    // Sampling machinery. Classes with no qualifying image are dropped from
    // the drawn distribution so every draw can be satisfied.
    ctx.index = cam::build_class_index(data.source.images, scene.k, cfg.n_min);
    auto has_candidates = [&](int c) { return !ctx.index.images_by_class[c].empty(); };
    if (cfg.sampling == SamplingStrategy::Cam) {
        ClassPartition effective;
        for (int c : scene.partition.foreground) {
            if (has_candidates(c)) effective.foreground.push_back(c);
        }
        for (int c : scene.partition.background) {
            if (has_candidates(c)) effective.background.push_back(c);
        }
        double p_fg = cfg.p_fg_branch;
        if (effective.foreground.empty()) p_fg = 0.0;
        if (effective.background.empty()) p_fg = 1.0;
        if (effective.foreground.empty() && effective.background.empty()) {
            throw ConfigError("cam.n_min leaves no sampleable class in the source dataset");
        }
        // Branch softmax needs non-empty class lists; reuse the other branch
        // when one side is empty (its probability is zero anyway).
        if (effective.foreground.empty()) effective.foreground = effective.background;
        if (effective.background.empty()) effective.background = effective.foreground;
        auto freq = cam::compute_frequencies(data.source.images, scene.k);
        ctx.dist = cam::sampling_distribution(freq, effective, cfg.t_b, cfg.t_f, p_fg);
    } else if (cfg.sampling == SamplingStrategy::Rcs) {
        auto freq = cam::compute_frequencies(data.source.images, scene.k);
        auto full = cam::rcs_distribution(freq, cfg.t_b);
        cam::SamplingDistribution pruned;
        pruned.p_fg_branch = 1.0;
        for (std::size_t i = 0; i < full.fore_classes.size(); ++i) {
            if (has_candidates(full.fore_classes[i])) {
                pruned.fore_classes.push_back(full.fore_classes[i]);
                pruned.p_fore.push_back(full.p_fore[i]);
            }
        }
        if (pruned.fore_classes.empty()) {
            throw ConfigError("cam.n_min leaves no sampleable class in the source dataset");
        }
        double total = 0.0;
        for (double p : pruned.p_fore) total += p;
        for (double& p : pruned.p_fore) p /= total;
        ctx.dist = pruned;
    }

    if (cfg.fdm_enabled && cfg.lambda_kd > 0.0) {
        if (data.aux.images.empty() && cfg.extractor_mode == model::ExtractorMode::Auxiliary) {
            throw ConfigError("fdm.extractor=auxiliary needs an aux dataset");
        }
        model::PretrainSettings ps;
        ps.iterations = cfg.pretrain_iterations;
        ps.batch_size = cfg.batch_size;
        ps.optim = cfg.optim;
        ctx.extractor = model::pretrain_extractor(data.aux.images, scene.k, cfg.d_hid,
                                                  cfg.extractor_mode, ps, cfg.seed);

        ctx.pre_embeddings.resize(data.source.images.size());
        parallel_for(data.source.images.size(), ctx.workers, [&](std::size_t i) {
            auto ex_feats = ctx.extractor->forward(ctx.source_feats[i]);
            ctx.pre_embeddings[i] =
                fdm::pool_foreground(ex_feats, data.source.images[i].labels,
                                     scene.partition, cfg.n_min_fg, static_cast<int>(i));
        });
    }
    return ctx;
}

StepInputs draw_step_inputs(const TrainConfig& cfg, const TrainContext& ctx, Rng& rng_batch,
                            Rng& rng_mask) {
    StepInputs in;
    const int n_src = static_cast<int>(ctx.data->source.images.size());
    const int n_tgt = static_cast<int>(ctx.target_images.size());
    for (int b = 0; b < cfg.batch_size; ++b) {
        if (cfg.sampling == SamplingStrategy::Uniform) {
            in.source_ids.push_back(static_cast<int>(rng_batch.uniform_int(0, n_src - 1)));
        } else {
            in.source_ids.push_back(cam::sample_source_image(ctx.dist, ctx.index, rng_batch));
        }
    }
    if (!cfg.self_training) return in;

    for (int b = 0; b < cfg.batch_size; ++b) {
        in.target_ids.push_back(static_cast<int>(rng_batch.uniform_int(0, n_tgt - 1)));
    }
    const int h = ctx.data->source.config.h;
    const int w = ctx.data->source.config.w;
    for (int b = 0; b < cfg.batch_size; ++b) {
        switch (cfg.mask_strategy) {
            case MaskStrategy::Cam: {
                MaskPair mp;
                mp.back = cam::make_block_mask(h, w, ctx.block_back_px, cfg.mask_ratio, rng_mask);
                mp.fore = cam::make_block_mask(h, w, ctx.block_fore_px, cfg.mask_ratio, rng_mask);
                in.masks.push_back(std::move(mp));
                break;
            }
            case MaskStrategy::Random: {
                MaskPair mp;
                mp.back = cam::make_block_mask(h, w, 1, cfg.mask_ratio, rng_mask);
                mp.fore = mp.back;
                in.masks.push_back(std::move(mp));
                break;
            }
            case MaskStrategy::Grid: {
                MaskPair mp;
                mp.back = cam::make_grid_mask(h, w, ctx.block_fore_px);
                mp.fore = mp.back;
                in.masks.push_back(std::move(mp));
                break;
            }
            case MaskStrategy::None:
                break;
        }
    }
    return in;
}

namespace {

struct ForwardBundle {
    model::ForwardResult fr;
    DenseArray probs;
};

// Concatenates per-image {P, K} arrays into one {B*P, K} array.
DenseArray stack_rows(std::span<const DenseArray> arrays) {
    if (arrays.empty()) return {};
    const std::size_t cols = arrays[0].shape[1];
    std::size_t rows = 0;
    for (const auto& a : arrays) rows += a.shape[0];
    DenseArray out({rows, cols});
    std::size_t pos = 0;
    for (const auto& a : arrays) {
        std::copy(a.data.begin(), a.data.end(), out.data.begin() + pos);
        pos += a.size();
    }
    return out;
}

void check_finite(double value, const char* term, int iter) {
    if (!std::isfinite(value)) {
        throw DivergenceError(std::string(term) + " non-finite at iteration " +
                              std::to_string(iter));
    }
}

DenseArray slice_rows(const DenseArray& stacked, std::size_t row0, std::size_t rows) {
    const std::size_t cols = stacked.shape[1];
    DenseArray out({rows, cols});
    std::copy_n(stacked.data.begin() + row0 * cols, rows * cols, out.data.begin());
    return out;
}

}  // namespace

TrainLogRecord train_step(model::SegModel& student, model::SegModel& teacher, TrainContext& ctx,
                          model::OptimizerState& opt, cdm::ReliabilityState& rel,
                          const StepInputs& in, const TrainConfig& cfg, int iter,
                          model::ParamGrads* grads_out) {
    const auto& data = *ctx.data;
    const auto& scene = data.source.config;
    const std::size_t px = static_cast<std::size_t>(scene.h) * scene.w;
    const int n_src = static_cast<int>(in.source_ids.size());
    const int n_tgt = static_cast<int>(in.target_ids.size());
    const bool kd_active = cfg.fdm_enabled && cfg.lambda_kd > 0.0 && ctx.extractor.has_value();
    const bool masked_active = cfg.mask_strategy != MaskStrategy::None && n_tgt > 0;

    // Phase A: forwards (student on source and target, teacher on target).
    std::vector<ForwardBundle> src(n_src), tgt(n_tgt);
    std::vector<std::vector<std::uint8_t>> pseudo(n_tgt);
    std::vector<std::vector<std::uint8_t>> student_pred(n_tgt);
    parallel_for(static_cast<std::size_t>(n_src + n_tgt), ctx.workers, [&](std::size_t u) {
        if (u < static_cast<std::size_t>(n_src)) {
            const auto& feats = ctx.source_feats[in.source_ids[u]];
            src[u].fr = model::forward(student, feats);
            src[u].probs = num::softmax(src[u].fr.logits, 1);
        } else {
            const std::size_t b = u - n_src;
            const auto& feats = ctx.target_feats[in.target_ids[b]];
            tgt[b].fr = model::forward(student, feats);
            tgt[b].probs = num::softmax(tgt[b].fr.logits, 1);
            student_pred[b] = cdm::argmax_labels(tgt[b].fr.logits);
            auto teacher_fr = model::forward(teacher, feats);
            pseudo[b] = cdm::argmax_labels(teacher_fr.logits);
        }
    });

    // Phase B: masked-target forwards (needs pseudo-labels for Eq.-style
    // branch selection in the combined mask).
    std::vector<ForwardBundle> msk(masked_active ? n_tgt : 0);
    std::vector<DenseArray> msk_feats(masked_active ? n_tgt : 0);
    if (masked_active) {
        parallel_for(static_cast<std::size_t>(n_tgt), ctx.workers, [&](std::size_t b) {
            const auto& img = ctx.target_images[in.target_ids[b]];
            auto rgb = cam::combine_masked_image(img, pseudo[b], scene.partition,
                                                 in.masks[b].back, in.masks[b].fore);
            msk_feats[b] = model::featurize_rgb(img.h, img.w, rgb);
            msk[b].fr = model::forward(student, msk_feats[b]);
            msk[b].probs = num::softmax(msk[b].fr.logits, 1);
        });
    }

    TrainLogRecord rec;
    rec.iter = iter;
    rec.lr_enc = cfg.optim.lr_encoder * opt.lr_scale();
    rec.lr_dec = cfg.optim.lr_decoder * opt.lr_scale();

    // Source CE (plain mean over the batch's labeled pixels).
    std::vector<DenseArray> src_probs_list;
    std::vector<std::uint8_t> src_labels;
    for (int b = 0; b < n_src; ++b) {
        src_probs_list.push_back(src[b].probs);
        const auto& labels = data.source.images[in.source_ids[b]].labels;
        src_labels.insert(src_labels.end(), labels.begin(), labels.end());
    }
    auto src_stacked = stack_rows(src_probs_list);
    auto ce = num::mean_cross_entropy(src_stacked, src_labels);
    rec.l_s = ce.loss;
    check_finite(rec.l_s, "L_S", iter);

    // Relational KD on source foreground embeddings.
    std::vector<DenseArray> d_neck_src(n_src);
    if (kd_active) {
        std::vector<fdm::ForegroundEmbedding> pre_embs, neck_embs;
        std::vector<int> emb_slots;
        for (int b = 0; b < n_src; ++b) {
            const int id = in.source_ids[b];
            const auto& pre = ctx.pre_embeddings[id];
            auto neck_emb =
                fdm::pool_foreground(src[b].fr.neck, data.source.images[id].labels,
                                     scene.partition, cfg.n_min_fg, id);
            if (pre.has_value() && neck_emb.has_value()) {
                pre_embs.push_back(*pre);
                neck_embs.push_back(*neck_emb);
                emb_slots.push_back(b);
            }
        }
        if (neck_embs.size() >= 2) {
            auto pre_stats = fdm::relational_stats(pre_embs, cfg.d_norm);
            auto neck_stats = fdm::relational_stats(neck_embs, cfg.d_norm);
            auto kd = fdm::kd_loss(pre_stats, neck_stats);
            rec.l_kd = kd.l_kd;
            check_finite(rec.l_kd, "L_KD", iter);
            for (std::size_t e = 0; e < emb_slots.size(); ++e) {
                const int b = emb_slots[e];
                const int id = in.source_ids[b];
                const double scale = cfg.lambda_kd / neck_embs[e].fg_pixel_count;
                DenseArray d_neck({px, static_cast<std::size_t>(cfg.d_hid)});
                const auto& labels = data.source.images[id].labels;
                for (std::size_t p = 0; p < px; ++p) {
                    if (!scene.partition.is_foreground(labels[p])) continue;
                    double* row = &d_neck.data[p * cfg.d_hid];
                    for (int j = 0; j < cfg.d_hid; ++j) row[j] += scale * kd.grad_neck[e][j];
                }
                d_neck_src[b] = std::move(d_neck);
            }
        }
    }

    // Target losses against the frozen reliability snapshot.
    std::vector<std::uint8_t> pseudo_stacked;
    std::vector<std::uint8_t> pred_stacked;
    DenseArray tgt_grad, msk_grad;
    if (n_tgt > 0) {
        std::vector<DenseArray> tgt_probs_list;
        for (int b = 0; b < n_tgt; ++b) {
            tgt_probs_list.push_back(tgt[b].probs);
            pseudo_stacked.insert(pseudo_stacked.end(), pseudo[b].begin(), pseudo[b].end());
            pred_stacked.insert(pred_stacked.end(), student_pred[b].begin(),
                                student_pred[b].end());
        }
        auto tgt_stacked = stack_rows(tgt_probs_list);
        if (cfg.cdm_mode == CdmConfigMode::Off) {
            auto plain = num::mean_cross_entropy(tgt_stacked, pseudo_stacked);
            rec.l_t = plain.loss;
            tgt_grad = std::move(plain.grad_logits);
        } else {
            auto wl = cdm::weighted_loss(tgt_stacked, pseudo_stacked, rel,
                                         cfg.cdm_mode == CdmConfigMode::Paper
                                             ? cdm::WeightingMode::Paper
                                             : cdm::WeightingMode::Inverted);
            rec.l_t = wl.loss;
            tgt_grad = std::move(wl.grad_logits);
        }
        check_finite(rec.l_t, "L_T", iter);

        if (masked_active) {
            std::vector<DenseArray> msk_probs_list;
            for (int b = 0; b < n_tgt; ++b) msk_probs_list.push_back(msk[b].probs);
            auto msk_stacked = stack_rows(msk_probs_list);
            if (cfg.cdm_mode == CdmConfigMode::Off) {
                auto plain = num::mean_cross_entropy(msk_stacked, pseudo_stacked);
                rec.l_m = plain.loss;
                msk_grad = std::move(plain.grad_logits);
            } else {
                auto wl = cdm::weighted_loss(msk_stacked, pseudo_stacked, rel,
                                             cfg.cdm_mode == CdmConfigMode::Paper
                                                 ? cdm::WeightingMode::Paper
                                                 : cdm::WeightingMode::Inverted);
                rec.l_m = wl.loss;
                msk_grad = std::move(wl.grad_logits);
            }
            check_finite(rec.l_m, "L_M", iter);
        }
    }

    rec.l_total = rec.l_s + cfg.lambda_kd * rec.l_kd + rec.l_t + rec.l_m;
    check_finite(rec.l_total, "L_Total", iter);

    // Phase C: backwards, merged in fixed order for determinism.
    const int n_units = n_src + n_tgt + (masked_active ? n_tgt : 0);
    std::vector<model::ParamGrads> unit_grads(n_units);
    parallel_for(static_cast<std::size_t>(n_units), ctx.workers, [&](std::size_t u) {
        if (u < static_cast<std::size_t>(n_src)) {
            const int b = static_cast<int>(u);
            const auto& feats = ctx.source_feats[in.source_ids[b]];
            auto d_logits = slice_rows(ce.grad_logits, static_cast<std::size_t>(b) * px, px);
            unit_grads[u] =
                model::backward(student, feats, src[b].fr.neck, d_logits, d_neck_src[b]);
        } else if (u < static_cast<std::size_t>(n_src + n_tgt)) {
            const int b = static_cast<int>(u) - n_src;
            const auto& feats = ctx.target_feats[in.target_ids[b]];
            auto d_logits = slice_rows(tgt_grad, static_cast<std::size_t>(b) * px, px);
            unit_grads[u] = model::backward(student, feats, tgt[b].fr.neck, d_logits, {});
        } else {
            const int b = static_cast<int>(u) - n_src - n_tgt;
            auto d_logits = slice_rows(msk_grad, static_cast<std::size_t>(b) * px, px);
            unit_grads[u] = model::backward(student, msk_feats[b], msk[b].fr.neck, d_logits, {});
        }
    });

    model::ParamGrads grads = model::ParamGrads::zeros_like(student);
    for (const auto& g : unit_grads) grads.accumulate(g);
    if (grads_out) *grads_out = grads;
    model::optimizer_step(opt, student, grads);

    if (n_tgt > 0) {
        cdm::update_reliability(rel, pred_stacked, pseudo_stacked);
    }
    model::ema_update(teacher, student, cfg.alpha);
    rec.beta_hash = rel.hash();
    return rec;
}

evalx::IouReport evaluate_model(const model::SegModel& m, std::span<const LabeledImage> images) {
    evalx::ConfusionMatrix cm(m.k);
    for (const auto& img : images) {
        auto fr = model::forward(m, model::featurize(img));
        auto pred = cdm::argmax_labels(fr.logits);
        evalx::accumulate(cm, pred, img.labels);
    }
    return evalx::iou(cm);
}

namespace {

evalx::IouReport evaluate_cached(const model::SegModel& m, const TrainContext& ctx) {
    evalx::ConfusionMatrix cm(m.k);
    std::vector<std::vector<std::uint8_t>> preds(ctx.eval_feats.size());
    parallel_for(ctx.eval_feats.size(), ctx.workers, [&](std::size_t i) {
        auto fr = model::forward(m, ctx.eval_feats[i]);
        preds[i] = cdm::argmax_labels(fr.logits);
    });
    for (std::size_t i = 0; i < ctx.eval_feats.size(); ++i) {
        evalx::accumulate(cm, preds[i], ctx.data->target_eval.images[i].labels);
    }
    return evalx::iou(cm);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_outputs(const std::string& out_dir, const TrainResult& result,
                   const SceneConfig& scene) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    std::ofstream csv(fs::path(out_dir) / "train_log.csv", std::ios::binary);
    csv << "iter,L_S,L_T,L_M,L_KD,L_Total,lr_enc,lr_dec\n";
    for (const auto& r : result.log) {
        csv << r.iter << ',' << format_double(r.l_s) << ',' << format_double(r.l_t) << ','
            << format_double(r.l_m) << ',' << format_double(r.l_kd) << ','
            << format_double(r.l_total) << ',' << format_double(r.lr_enc) << ','
            << format_double(r.lr_dec) << '\n';
    }
    csv.close();

    std::ofstream events(fs::path(out_dir) / "events.jsonl", std::ios::binary);
    for (const auto& ev : result.evals) {
        nlohmann::json per_class = nlohmann::json::object();
        for (int c = 0; c < static_cast<int>(ev.report.per_class.size()); ++c) {
            const std::string name = c < static_cast<int>(scene.class_names.size())
                                         ? scene.class_names[c]
                                         : "class_" + std::to_string(c);
            if (ev.report.present[c]) {
                per_class[name] = ev.report.per_class[c];
            } else {
                per_class[name] = nullptr;
            }
        }
        nlohmann::json line = {{"iter", ev.iter},
                               {"miou", ev.report.miou},
                               {"per_class_iou", per_class},
                               {"beta", ev.beta}};
        events << line.dump() << "\n";
    }
    events.close();

    model::save_checkpoint((fs::path(out_dir) / "final.omck").string(), result.final_model);
    model::save_checkpoint((fs::path(out_dir) / "best.omck").string(), result.best_model);
}

}  // namespace

TrainResult run_training(const TrainConfig& cfg, const Datasets& data,
                         const std::string& out_dir) {
    TrainContext ctx = prepare_context(cfg, data);
    const auto& scene = data.source.config;

    std::uint64_t seed_stream = cfg.seed;
    Rng root(Rng::splitmix64(seed_stream) ^ 0x4f4d554441ULL);
    Rng rng_init = root.fork(kInitTag);
    Rng rng_batch = root.fork(kBatchTag);
    Rng rng_mask = root.fork(kMaskTag);

    model::SegModel student = model::SegModel::init(model::kFeatureDim, cfg.d_hid, scene.k, rng_init);
    model::SegModel teacher = student;  // teacher starts as a copy
    model::OptimizerState opt = model::OptimizerState::init(student, cfg.optim);
    cdm::ReliabilityState rel = cdm::ReliabilityState::init(scene.k, cfg.cdm_decay, cfg.cdm_beta_init);

    TrainResult result;
    result.best_model = student;
    result.best_miou = -1.0;

    model::SegModel last_good = student;
    try {
        for (int iter = 1; iter <= cfg.iterations; ++iter) {
            auto inputs = draw_step_inputs(cfg, ctx, rng_batch, rng_mask);
            auto rec = train_step(student, teacher, ctx, opt, rel, inputs, cfg, iter);
            result.log.push_back(rec);
            last_good = student;

            if (iter % cfg.eval_interval == 0 || iter == cfg.iterations) {
                EvalRecord ev;
                ev.iter = iter;
                ev.report = evaluate_cached(student, ctx);
                ev.beta = rel.beta;
                if (ev.report.miou > result.best_miou) {
                    result.best_miou = ev.report.miou;
                    result.best_model = student;
                    result.best_iter = iter;
                }
                result.final_miou = ev.report.miou;
                result.evals.push_back(std::move(ev));
            }
        }
    } catch (const DivergenceError&) {
        result.final_model = last_good;
        if (result.best_iter < 0) result.best_model = last_good;
        if (!out_dir.empty()) write_outputs(out_dir, result, scene);
        throw;
    }

    result.final_model = student;
    if (result.best_iter < 0) {
        result.best_model = student;
        result.best_miou = result.final_miou;
    }
    if (!out_dir.empty()) write_outputs(out_dir, result, scene);
    return result;
}

}  // namespace omuda::trainer
