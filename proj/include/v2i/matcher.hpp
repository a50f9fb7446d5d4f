#pragma once

#include <span>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "v2i/detr.hpp"

namespace v2i::detr {

// Ground truth of one image: boxes [G, 4] normalized (cx, cy, w, h), labels [G].
struct Target {
    torch::Tensor boxes;
    torch::Tensor labels;

    std::int64_t size() const { return boxes.defined() ? boxes.size(0) : 0; }
};

// Pairs of (query_index, target_index). Unmatched queries are no-object.
struct MatchResult {
    std::vector<std::pair<int, int>> pairs;
};

// Cost and loss weights share one set, plus the down-weighting of the
// no-object class in the classification term.
struct LossWeights {
    double cls = 2.0;
    double l1 = 5.0;
    double giou = 2.0;
    double eos = 0.1;
};

// Minimum-cost assignment for a row-major rows x cols matrix. Returns, for
// each row, the assigned column or -1 when rows > cols leaves it unassigned.
// Non-finite costs raise DivergenceError.
std::vector<int> solve_assignment(std::span<const double> cost, int rows, int cols);

torch::Tensor box_cxcywh_to_xyxy(const torch::Tensor& boxes);
// Elementwise GIoU of matching rows of two [n, 4] xyxy tensors.
torch::Tensor giou_aligned(const torch::Tensor& a, const torch::Tensor& b);
// Pairwise GIoU [n, m] between [n, 4] and [m, 4] xyxy tensors.
torch::Tensor giou_pairwise(const torch::Tensor& a, const torch::Tensor& b);

// Matching cost [N, G]: cls*(-p_class) + l1*|b - t|_1 + giou*(-GIoU).
torch::Tensor matching_cost(const DetectionSet& pred, const Target& target, const LossWeights& w);

// pred is unbatched ([N, 4] boxes, [N, K+1] logits).
MatchResult hungarian_match(const DetectionSet& pred, const Target& target, const LossWeights& w = {});

struct DetectionLoss {
    torch::Tensor total;
    torch::Tensor ce;
    torch::Tensor l1;
    torch::Tensor giou;
};

// Batched detection loss: pred has a leading batch dimension and targets and
// matches hold one entry per image. CE covers every query (weighted mean),
// L1 and GIoU terms are summed over matched pairs and divided by the total
// target count (at least 1).
DetectionLoss detection_loss(const DetectionSet& pred, std::span<const Target> targets,
                             std::span<const MatchResult> matches, const LossWeights& w = {});

// Unbatched convenience overload.
DetectionLoss detection_loss(const DetectionSet& pred, const Target& target, const MatchResult& match,
                             const LossWeights& w = {});

}  // namespace v2i::detr
