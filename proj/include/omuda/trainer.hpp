#pragma once

#include <optional>
#include <string>
#include <vector>

#include "omuda/cam.hpp"
#include "omuda/cdm.hpp"
#include "omuda/datagen.hpp"
#include "omuda/eval.hpp"
#include "omuda/fdm.hpp"
#include "omuda/model.hpp"

namespace omuda::trainer {

enum class MaskStrategy { Cam, Random, Grid, None };
enum class SamplingStrategy { Cam, Rcs, Uniform };
enum class CdmConfigMode { Paper, Inverted, Off };

struct TrainConfig {
    std::uint64_t seed = 1;
    int iterations = 3000;
    int batch_size = 3;
    double lambda_kd = 0.01;
    double alpha = 0.999;  // EMA decay
    int eval_interval = 250;
    bool self_training = true;  // false: source-only baseline
    int workers = 0;            // per-step parallelism; 0 = auto

    SamplingStrategy sampling = SamplingStrategy::Cam;
    double t_b = 1.0;
    double t_f = 0.7;
    double p_fg_branch = 0.5;
    int n_min = 8;

    MaskStrategy mask_strategy = MaskStrategy::Cam;
    double mask_ratio = 0.7;
    int block_fore = 16;  // nominal at 64x64; scaled by h/64
    int block_back = 32;

    CdmConfigMode cdm_mode = CdmConfigMode::Paper;
    double cdm_decay = 0.9;
    double cdm_beta_init = 0.5;

    bool fdm_enabled = true;
    fdm::DistanceNormalization d_norm = fdm::DistanceNormalization::Mean;
    int n_min_fg = 8;
    model::ExtractorMode extractor_mode = model::ExtractorMode::Auxiliary;
    int pretrain_iterations = 300;

    int d_hid = 32;
    model::OptimizerSettings optim;

    void validate() const;  // throws ConfigError naming the config key
};

struct TrainLogRecord {
    int iter = 0;
    double l_s = 0, l_t = 0, l_m = 0, l_kd = 0, l_total = 0;
    double lr_enc = 0, lr_dec = 0;
    std::uint64_t beta_hash = 0;
};

struct EvalRecord {
    int iter = 0;
    evalx::IouReport report;
    std::vector<double> beta;
};

struct Datasets {
    datagen::Dataset source;
    datagen::Dataset target;
    datagen::Dataset target_eval;
    datagen::Dataset aux;  // mixed-domain, for extractor pretraining

    void validate() const;
};

// Reads source/, target/, target_eval/ and (if present) aux/ from dir.
Datasets load_datasets(const std::string& dir);

struct MaskPair {
    cam::BlockMask back;
    cam::BlockMask fore;
};

// One iteration's draws; run_training fills this from its seeded streams,
// tests can inject fixed inputs.
struct StepInputs {
    std::vector<int> source_ids;
    std::vector<int> target_ids;
    std::vector<MaskPair> masks;  // per target image; empty when strategy = none
};

// Precomputed immutable state shared by all steps.
struct TrainContext {
    const Datasets* data = nullptr;
    std::vector<LabeledImage> target_images;  // label-stripped view
    std::vector<DenseArray> source_feats;
    std::vector<DenseArray> target_feats;
    std::vector<DenseArray> eval_feats;
    std::vector<std::optional<fdm::ForegroundEmbedding>> pre_embeddings;
    std::optional<model::PretrainedExtractor> extractor;
    cam::SamplingDistribution dist;
    cam::ClassIndex index;
    int block_fore_px = 16;
    int block_back_px = 32;
    int workers = 1;
};

TrainContext prepare_context(const TrainConfig& cfg, const Datasets& data);

StepInputs draw_step_inputs(const TrainConfig& cfg, const TrainContext& ctx, Rng& rng_batch,
                            Rng& rng_mask);

// One full iteration: source CE + relational KD, teacher pseudo-labels,
// weighted target and masked-target losses, one optimizer step, reliability
// update, EMA update. `grads_out`, when set, receives the summed gradient
// buffer that fed the optimizer.
TrainLogRecord train_step(model::SegModel& student, model::SegModel& teacher, TrainContext& ctx,
                          model::OptimizerState& opt, cdm::ReliabilityState& rel,
                          const StepInputs& in, const TrainConfig& cfg, int iter,
                          model::ParamGrads* grads_out = nullptr);

struct TrainResult {
    model::SegModel final_model;
    model::SegModel best_model;
    double final_miou = 0.0;
    double best_miou = 0.0;
    int best_iter = -1;
    std::vector<TrainLogRecord> log;
    std::vector<EvalRecord> evals;
};

// Deterministic in cfg.seed. When out_dir is non-empty, writes
// train_log.csv, events.jsonl, final.omck and best.omck there; on
// divergence the last good checkpoint is written before rethrowing.
TrainResult run_training(const TrainConfig& cfg, const Datasets& data,
                         const std::string& out_dir = "");

evalx::IouReport evaluate_model(const model::SegModel& m, std::span<const LabeledImage> images);

}  // namespace omuda::trainer
