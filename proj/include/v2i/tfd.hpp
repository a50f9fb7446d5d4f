#pragma once

#include <span>
#include <vector>

#include <torch/torch.h>

#include "v2i/box.hpp"

namespace v2i::tfd {

enum class SigmaMode { anisotropic, isotropic };

// Gaussian foreground weighting on a feature grid. heatmap is the per-cell
// maximum over boxes; mask is the heatmap divided by its L2 norm (all zeros
// when there are no boxes).
struct SoftMask {
    int h = 0;
    int w = 0;
    std::vector<double> heatmap;  // [h, w]
    std::vector<double> mask;     // [h, w]
    std::vector<Box> boxes;
    std::vector<std::pair<double, double>> sigmas;  // (sigma_x, sigma_y) per box, grid units

    double at(int y, int x) const { return mask[y * w + x]; }
    torch::Tensor tensor() const;  // [h, w] float64
};

// Grid position of a box: its centre cell plus size-adaptive sigmas.
struct GridGaussian {
    int cx = 0;
    int cy = 0;
    double sigma_x = 0.5;
    double sigma_y = 0.5;
};

GridGaussian grid_gaussian(const Box& box, int h, int w, SigmaMode mode = SigmaMode::anisotropic);

// Boxes are normalized (cx, cy, w, h). Each box centre is snapped to its
// grid cell; sigma = max(extent / 6, 0.5) in cells per axis.
SoftMask build_gaussian_mask(std::span<const Box> boxes, int h, int w,
                             SigmaMode mode = SigmaMode::anisotropic);

// Ablation variant: cells whose centre lies in any box are 1 (the centre
// cell at minimum), the rest 0, then L2-normalized.
SoftMask build_hard_mask(std::span<const Box> boxes, int h, int w);

// Ablation variant: per-query softmax of query/feature similarity over the
// cells, weighted by each query's foreground probability, then L2-normalized.
// decoded: [N, d], features: [d, h, w], fg_prob: [N].
torch::Tensor attention_mask(const torch::Tensor& decoded, const torch::Tensor& features,
                             const torch::Tensor& fg_prob);

// Masked regression loss between student and teacher last-stage features:
// sum(M * |F_s - Y_t|) / (d*h*w), averaged over the batch. The teacher side
// is detached. Accepts [d, h, w] or [B, d, h, w] features with masks [h, w] or
// [B, h, w].
torch::Tensor tfd_loss(const torch::Tensor& student, const torch::Tensor& teacher, const torch::Tensor& mask);
torch::Tensor tfd_loss(const torch::Tensor& student, const torch::Tensor& teacher, const SoftMask& mask);

enum class FdNorm { l1, l2 };

// Unmasked variant: mean |F_s - F_t| (or mean squared difference for l2).
torch::Tensor vanilla_fd_loss(const torch::Tensor& student, const torch::Tensor& teacher,
                              FdNorm norm = FdNorm::l1);

}  // namespace v2i::tfd
