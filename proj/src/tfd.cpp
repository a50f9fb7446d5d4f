#include "v2i/tfd.hpp"

#include <algorithm>
#include <cmath>

#include "v2i/errors.hpp"

namespace v2i::tfd {

namespace {

void normalize(SoftMask& m) {
    double ss = 0;
    for (double v : m.heatmap) ss += v * v;
    m.mask.assign(m.heatmap.size(), 0.0);
    if (ss <= 0) return;
    const double inv = 1.0 / std::sqrt(ss);
    for (std::size_t i = 0; i < m.heatmap.size(); ++i) m.mask[i] = m.heatmap[i] * inv;
}

void check_grid(int h, int w) {
    if (h < 1 || w < 1) throw ShapeError("mask grid dimensions must be >= 1");
}

}  // namespace

torch::Tensor SoftMask::tensor() const {
    return torch::tensor(mask, torch::kDouble).view({h, w});
}

GridGaussian grid_gaussian(const Box& box, int h, int w, SigmaMode mode) {
    GridGaussian g;
    g.cx = std::clamp(static_cast<int>(std::floor(box.cx * w)), 0, w - 1);
    g.cy = std::clamp(static_cast<int>(std::floor(box.cy * h)), 0, h - 1);
    double sx = box.w * w / 6.0, sy = box.h * h / 6.0;
    if (mode == SigmaMode::isotropic) sx = sy = std::sqrt(std::max(sx, 0.0) * std::max(sy, 0.0));
    g.sigma_x = std::max(sx, 0.5);
    g.sigma_y = std::max(sy, 0.5);
    return g;
}

SoftMask build_gaussian_mask(std::span<const Box> boxes, int h, int w, SigmaMode mode) {
    check_grid(h, w);
    SoftMask m;
    m.h = h;
    m.w = w;
    m.boxes.assign(boxes.begin(), boxes.end());
    m.heatmap.assign(static_cast<std::size_t>(h) * w, 0.0);
    for (const Box& b : boxes) {
        const GridGaussian g = grid_gaussian(b, h, w, mode);
        m.sigmas.emplace_back(g.sigma_x, g.sigma_y);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double dx = x - g.cx, dy = y - g.cy;
                const double v = std::exp(-(dx * dx) / (2 * g.sigma_x * g.sigma_x) -
                                          (dy * dy) / (2 * g.sigma_y * g.sigma_y));
                double& cell = m.heatmap[y * w + x];
                cell = std::max(cell, v);
            }
    }
    normalize(m);
    return m;
}

SoftMask build_hard_mask(std::span<const Box> boxes, int h, int w) {
    check_grid(h, w);
    SoftMask m;
    m.h = h;
    m.w = w;
    m.boxes.assign(boxes.begin(), boxes.end());
    m.heatmap.assign(static_cast<std::size_t>(h) * w, 0.0);
    for (const Box& b : boxes) {
        const PixelBox c = b.corners();
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double px = (x + 0.5) / w, py = (y + 0.5) / h;
                if (px >= c.x_min && px <= c.x_max && py >= c.y_min && py <= c.y_max) m.heatmap[y * w + x] = 1.0;
            }
        const GridGaussian g = grid_gaussian(b, h, w);
        m.heatmap[g.cy * w + g.cx] = 1.0;
    }
    normalize(m);
    return m;
}

torch::Tensor attention_mask(const torch::Tensor& decoded, const torch::Tensor& features,
                             const torch::Tensor& fg_prob) {
    torch::NoGradGuard no_grad;
    const auto d = features.size(0), h = features.size(1), w = features.size(2);
    auto sim = torch::matmul(decoded, features.reshape({d, h * w})) / std::sqrt(static_cast<double>(d));
    auto attn = torch::softmax(sim, -1);                                   // [N, h*w]
    auto heat = (fg_prob.unsqueeze(1) * attn).sum(0).view({h, w});
    auto n = heat.norm();
    if (n.item<double>() <= 0) return torch::zeros_like(heat);
    return heat / n;
}

torch::Tensor tfd_loss(const torch::Tensor& student, const torch::Tensor& teacher, const torch::Tensor& mask) {
    if (!student.sizes().equals(teacher.sizes()))
        throw ShapeError("tfd_loss: student and teacher features differ in shape");
    const bool single = student.dim() == 3;
    auto s = single ? student.unsqueeze(0) : student;
    auto t = (single ? teacher.unsqueeze(0) : teacher).detach();
    auto m = mask.dim() == 2 ? mask.unsqueeze(0) : mask;
    if (s.dim() != 4 || m.dim() != 3 || m.size(1) != s.size(2) || m.size(2) != s.size(3) ||
        (m.size(0) != s.size(0) && m.size(0) != 1))
        throw ShapeError("tfd_loss: mask grid does not match the feature grid");
    const double count = static_cast<double>(s.size(1) * s.size(2) * s.size(3));
    auto weighted = m.unsqueeze(1).to(s.dtype()) * (s - t).abs();
    return weighted.flatten(1).sum(1).div(count).mean();
}

torch::Tensor tfd_loss(const torch::Tensor& student, const torch::Tensor& teacher, const SoftMask& mask) {
    return tfd_loss(student, teacher, mask.tensor().to(student.dtype()));
}

torch::Tensor vanilla_fd_loss(const torch::Tensor& student, const torch::Tensor& teacher, FdNorm norm) {
    if (!student.sizes().equals(teacher.sizes()))
        throw ShapeError("vanilla_fd_loss: student and teacher features differ in shape");
    auto diff = student - teacher.detach();
    return norm == FdNorm::l1 ? diff.abs().mean() : diff.pow(2).mean();
}

}  // namespace v2i::tfd
