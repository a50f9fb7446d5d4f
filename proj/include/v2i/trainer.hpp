#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "v2i/config.hpp"
#include "v2i/data_synth.hpp"
#include "v2i/detr.hpp"
#include "v2i/matcher.hpp"
#include "v2i/metrics.hpp"

namespace v2i::train {

struct LossBreakdown {
    double l_det = 0, l_bk = 0, l_qe = 0;
    double lambda_bk = 1, lambda_qe = 5;
    double total = 0;
};

// l_det + lambda_bk * l_bk + lambda_qe * l_qe. Non-finite parts raise
// DivergenceError.
double total_loss(const LossBreakdown& parts);

// One training sample: a frame of a clip, served with its temporal window.
struct Sample {
    int clip = 0;
    int frame = 0;
};

struct Batch {
    torch::Tensor windows;  // [B, T, C, H, W]
    torch::Tensor images;   // [B, C, H, W], the current frames
    std::vector<int> current;
    std::vector<detr::Target> targets;
    std::vector<std::vector<Box>> boxes;  // normalized, per sample
    std::vector<Sample> samples;
};

std::vector<Sample> all_samples(const data::Dataset& dataset);
Batch make_batch(const data::Dataset& dataset, std::span<const Sample> samples, int T);

// Loss tensors of one step; total carries the graph.
struct StepLosses {
    torch::Tensor det, bk, qe, total;
    LossBreakdown parts;
};

// Detection loss over the last decoder layer, plus the others when aux is on.
torch::Tensor detection_objective(const std::vector<detr::DetectionSet>& layers, std::span<const detr::Target> targets,
                                  const TrainConfig& train);

StepLosses teacher_losses(detr::DetectorImpl& teacher, const Batch& batch, const ExperimentConfig& cfg);

// Student objective with distillation terms enabled by cfg.distill. The
// teacher runs without autograd unless teacher.trainable is set.
// selection_seed drives the cross-view query sampling of this step.
StepLosses student_losses(detr::DetectorImpl& student, detr::DetectorImpl& teacher, const Batch& batch,
                          const ExperimentConfig& cfg, std::uint64_t selection_seed);

struct RunOptions {
    std::filesystem::path out_dir;
    const data::Dataset* validation = nullptr;
    // Called after every optimizer step with the logged values.
    std::function<void(int, const LossBreakdown&)> on_step;
    // Called after backward and before the optimizer step (tests inspect
    // gradients here).
    std::function<void(int)> after_backward;
    bool verbose = false;
};

struct RunResult {
    std::filesystem::path checkpoint;
    std::filesystem::path log;
    nlohmann::json metrics;
    std::uint64_t parameter_checksum = 0;
    int steps = 0;
};

// Trains the video teacher on current-frame targets using T-frame windows.
RunResult train_teacher(const data::Dataset& train, const ExperimentConfig& cfg, const RunOptions& opt);

// Trains the single-frame student against a frozen teacher checkpoint. With
// both distillation terms disabled this is plain student training and the
// teacher checkpoint may be empty. Teacher d and N must match (ConfigError).
RunResult distill_student(const data::Dataset& train, const std::filesystem::path& teacher_ckpt,
                          const ExperimentConfig& cfg, const RunOptions& opt);

// Same as above with an in-memory teacher (may be null when unused).
RunResult distill_student(const data::Dataset& train, detr::Detector teacher, const ExperimentConfig& cfg,
                          const RunOptions& opt);

// Detections of one image [C, H, W] (or a window [T, C, H, W] with its
// current slot for video models) with score >= score_thresh, best top_k.
std::vector<eval::Detection> inference(detr::DetectorImpl& model, const torch::Tensor& input, int current,
                                       double score_thresh, int top_k);

// Runs the model over every frame of a dataset. Video models get windows of
// their configured length.
std::vector<eval::FrameRecord> predict_dataset(detr::DetectorImpl& model, const data::Dataset& dataset,
                                               double score_thresh, int top_k);

eval::EvalResult evaluate_model(detr::DetectorImpl& model, const data::Dataset& dataset, const EvalConfig& ev);

nlohmann::json to_json(const eval::EvalResult& r, bool per_clip = false);

// Puts torch into single-threaded deterministic mode and seeds it.
void seed_everything(std::uint64_t seed);

}  // namespace v2i::train
