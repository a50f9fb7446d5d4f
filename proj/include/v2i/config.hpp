#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "v2i/cqd.hpp"
#include "v2i/data_synth.hpp"
#include "v2i/detr.hpp"
#include "v2i/matcher.hpp"
#include "v2i/metrics.hpp"
#include "v2i/tfd.hpp"

namespace v2i {

enum class FdVariant { vanilla, gt_hard_mask, attention_mask, gaussian_soft };

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 1e-4;
    int batch_size = 8;
    int epochs = 12;
    int max_steps = 0;  // > 0 caps the step count regardless of epochs
    int T = 3;
    int N = 100;
    double grad_clip = 0.1;
    double lr_drop_at = 0.8;  // fraction of total steps
    double lr_drop_factor = 0.1;
    bool aux_loss = true;
    detr::LossWeights loss;
};

// Distillation terms of the student objective.
struct DistillConfig {
    double lambda_bk = 1.0;
    double lambda_qe = 5.0;
    bool tfd = true;
    bool cqd = true;
    FdVariant fd_variant = FdVariant::gaussian_soft;
    tfd::SigmaMode sigma_mode = tfd::SigmaMode::anisotropic;
    tfd::FdNorm vanilla_norm = tfd::FdNorm::l1;
    cqd::CountMode count_mode = cqd::CountMode::floor_NT;
};

struct TeacherConfig {
    bool msi = true;
    // Joint fine-tuning of the teacher during distillation; frozen by default.
    bool trainable = false;
    // Teacher training length; 0 uses train.epochs.
    int epochs = 0;
};

struct EvalConfig {
    double iou_thresh = 0.5;
    double score_thresh = 0.5;
    int top_k = 100;
    eval::MatchRule rule = eval::MatchRule::iou;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    data::GeneratorConfig data;
    int test_clips = 20;
    detr::ModelConfig model;
    TrainConfig train;
    DistillConfig distill;
    TeacherConfig teacher;
    EvalConfig eval;

    // Throws ConfigError.
    void validate() const;
    std::uint64_t hash() const;

    // Model configs for the two roles, derived from the shared model section.
    detr::ModelConfig teacher_model() const;
    detr::ModelConfig student_model() const;

    // Independent RNG streams derived from the root seed.
    std::uint64_t stream_seed(std::uint64_t stream) const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
// Unknown keys raise ConfigError.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Applies "a.b.c=value" overrides to a JSON document. Values parse as JSON
// when possible and fall back to strings. Throws ConfigError.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Reads a config file (may be empty path for defaults), applies overrides
// and parses. Overrides win over the file.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

std::string to_string(FdVariant v);
std::string to_string(cqd::CountMode m);

}  // namespace v2i
