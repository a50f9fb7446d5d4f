#include "v2i/matcher.hpp"

#include <cmath>
#include <limits>

#include "v2i/errors.hpp"

namespace v2i::detr {

namespace {

constexpr double kEps = 1e-7;

// Shortest augmenting path Hungarian method with row/column potentials,
// rows <= cols, 1-based internally.
std::vector<int> assign_rows(std::span<const double> a, int n, int m) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) minv[j] = cur, way[j] = j0;
                if (minv[j] < delta) delta = minv[j], j1 = j;
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

}  // namespace

std::vector<int> solve_assignment(std::span<const double> cost, int rows, int cols) {
    if (static_cast<std::size_t>(rows) * cols != cost.size())
        throw ShapeError("cost matrix size does not match rows x cols");
    if (rows == 0 || cols == 0) return std::vector<int>(rows, -1);
    for (double c : cost)
        if (!std::isfinite(c)) throw DivergenceError("non-finite matching cost");
    if (rows <= cols) return assign_rows(cost, rows, cols);
    std::vector<double> t(cost.size());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) t[c * rows + r] = cost[r * cols + c];
    const std::vector<int> col_to_row = assign_rows(t, cols, rows);
    std::vector<int> out(rows, -1);
    for (int c = 0; c < cols; ++c) out[col_to_row[c]] = c;
    return out;
}

torch::Tensor box_cxcywh_to_xyxy(const torch::Tensor& b) {
    auto cx = b.select(-1, 0), cy = b.select(-1, 1), w = b.select(-1, 2), h = b.select(-1, 3);
    return torch::stack({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}, -1);
}

namespace {

torch::Tensor area(const torch::Tensor& b) {
    return (b.select(-1, 2) - b.select(-1, 0)).clamp_min(0) * (b.select(-1, 3) - b.select(-1, 1)).clamp_min(0);
}

// Shared GIoU arithmetic; a and b broadcast against each other.
torch::Tensor giou_broadcast(const torch::Tensor& a, const torch::Tensor& b) {
    auto lt = torch::max(a.narrow(-1, 0, 2), b.narrow(-1, 0, 2));
    auto rb = torch::min(a.narrow(-1, 2, 2), b.narrow(-1, 2, 2));
    auto wh = (rb - lt).clamp_min(0);
    auto inter = wh.select(-1, 0) * wh.select(-1, 1);
    auto uni = (area(a) + area(b) - inter).clamp_min(kEps);
    auto hlt = torch::min(a.narrow(-1, 0, 2), b.narrow(-1, 0, 2));
    auto hrb = torch::max(a.narrow(-1, 2, 2), b.narrow(-1, 2, 2));
    auto hwh = (hrb - hlt).clamp_min(0);
    auto hull = (hwh.select(-1, 0) * hwh.select(-1, 1)).clamp_min(kEps);
    return inter / uni - (hull - uni) / hull;
}

}  // namespace

torch::Tensor giou_aligned(const torch::Tensor& a, const torch::Tensor& b) { return giou_broadcast(a, b); }

torch::Tensor giou_pairwise(const torch::Tensor& a, const torch::Tensor& b) {
    return giou_broadcast(a.unsqueeze(1), b.unsqueeze(0));
}

torch::Tensor matching_cost(const DetectionSet& pred, const Target& target, const LossWeights& w) {
    auto prob = torch::softmax(pred.class_logits, -1);                        // [N, K+1]
    auto cost_cls = -prob.index_select(1, target.labels);                     // [N, G]
    auto cost_l1 = torch::cdist(pred.boxes, target.boxes.to(pred.boxes.dtype()), 1.0);  // [N, G]
    auto cost_giou = -giou_pairwise(box_cxcywh_to_xyxy(pred.boxes),
                                    box_cxcywh_to_xyxy(target.boxes.to(pred.boxes.dtype())));
    return w.cls * cost_cls + w.l1 * cost_l1 + w.giou * cost_giou;
}

MatchResult hungarian_match(const DetectionSet& pred, const Target& target, const LossWeights& w) {
    MatchResult result;
    const auto G = target.size();
    if (G == 0) return result;
    if (pred.boxes.dim() != 2) throw ShapeError("hungarian_match expects unbatched predictions");
    torch::NoGradGuard no_grad;
    auto cost = matching_cost(pred, target, w).to(torch::kDouble).contiguous().cpu();
    const int N = static_cast<int>(cost.size(0));
    const std::span<const double> c(cost.data_ptr<double>(), static_cast<std::size_t>(cost.numel()));
    const std::vector<int> assigned = solve_assignment(c, N, static_cast<int>(G));
    for (int q = 0; q < N; ++q)
        if (assigned[q] >= 0) result.pairs.emplace_back(q, assigned[q]);
    return result;
}

DetectionLoss detection_loss(const DetectionSet& pred, std::span<const Target> targets,
                             std::span<const MatchResult> matches, const LossWeights& w) {
    const auto B = pred.boxes.size(0), N = pred.boxes.size(1);
    const auto K1 = pred.class_logits.size(2);
    if (static_cast<std::int64_t>(targets.size()) != B || static_cast<std::int64_t>(matches.size()) != B)
        throw ShapeError("detection_loss: one target and one match per image required");
    const auto opts = pred.boxes.options();

    auto classes = torch::full({B, N}, K1 - 1, torch::kLong);
    std::vector<std::int64_t> bi, qi;
    std::vector<torch::Tensor> tboxes;
    std::int64_t num_targets = 0;
    for (std::int64_t b = 0; b < B; ++b) {
        num_targets += targets[b].size();
        for (auto [q, t] : matches[b].pairs) {
            classes[b][q] = targets[b].labels[t].item<std::int64_t>();
            bi.push_back(b);
            qi.push_back(q);
            tboxes.push_back(targets[b].boxes[t]);
        }
    }
    auto class_weight = torch::ones({K1}, opts);
    class_weight[K1 - 1] = w.eos;
    auto ce = torch::nn::functional::cross_entropy(
        pred.class_logits.reshape({B * N, K1}), classes.view({B * N}),
        torch::nn::functional::CrossEntropyFuncOptions().weight(class_weight));

    const double norm = static_cast<double>(std::max<std::int64_t>(num_targets, 1));
    torch::Tensor l1, gi;
    if (bi.empty()) {
        l1 = torch::zeros({}, opts);
        gi = torch::zeros({}, opts);
    } else {
        auto src = pred.boxes.index({torch::tensor(bi), torch::tensor(qi)});
        auto tgt = torch::stack(tboxes).to(opts);
        l1 = (src - tgt).abs().sum() / norm;
        gi = (1 - giou_aligned(box_cxcywh_to_xyxy(src), box_cxcywh_to_xyxy(tgt))).sum() / norm;
    }
    return {w.cls * ce + w.l1 * l1 + w.giou * gi, ce, l1, gi};
}

DetectionLoss detection_loss(const DetectionSet& pred, const Target& target, const MatchResult& match,
                             const LossWeights& w) {
    DetectionSet batched{pred.boxes.unsqueeze(0), pred.class_logits.unsqueeze(0)};
    return detection_loss(batched, std::span<const Target>(&target, 1), std::span<const MatchResult>(&match, 1), w);
}

}  // namespace v2i::detr
