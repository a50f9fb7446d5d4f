#include "v2i/metrics.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

namespace v2i::eval {

namespace {

std::vector<std::size_t> score_order(std::span<const Detection> dets) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    return order;
}

bool centroid_inside(const PixelBox& det, const PixelBox& gt) {
    const double cx = 0.5 * (det.x_min + det.x_max), cy = 0.5 * (det.y_min + det.y_max);
    return cx >= gt.x_min && cx <= gt.x_max && cy >= gt.y_min && cy <= gt.y_max;
}

// Per detection (in input order): index of the matched truth or -1.
std::vector<int> greedy_match(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                              double iou_thresh, MatchRule rule) {
    std::vector<int> assigned(dets.size(), -1);
    std::vector<char> taken(gts.size(), 0);
    for (std::size_t i : score_order(dets)) {
        double best = -1.0;
        int best_g = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g].class_id != dets[i].class_id) continue;
            const double v = iou(dets[i].box, gts[g].box);
            const bool ok = rule == MatchRule::iou ? v >= iou_thresh : centroid_inside(dets[i].box, gts[g].box);
            if (ok && v > best) best = v, best_g = static_cast<int>(g);
        }
        if (best_g >= 0) {
            taken[best_g] = 1;
            assigned[i] = best_g;
        }
    }
    return assigned;
}

std::vector<Detection> above(std::span<const Detection> dets, double score_thresh) {
    std::vector<Detection> out;
    for (const Detection& d : dets)
        if (d.score >= score_thresh) out.push_back(d);
    return out;
}

Counts total_counts(std::span<const FrameRecord> records, double iou_thresh, double score_thresh, MatchRule rule) {
    Counts c;
    for (const FrameRecord& r : records) c += match_frame(above(r.detections, score_thresh), r.truths, iou_thresh, rule);
    return c;
}

}  // namespace

Counts match_frame(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_thresh,
                   MatchRule rule) {
    const std::vector<int> assigned = greedy_match(dets, gts, iou_thresh, rule);
    Counts c;
    c.tp = static_cast<int>(std::count_if(assigned.begin(), assigned.end(), [](int g) { return g >= 0; }));
    c.fp = static_cast<int>(dets.size()) - c.tp;
    c.fn = static_cast<int>(gts.size()) - c.tp;
    return c;
}

double f1_score(double precision, double recall) {
    return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
}

void finalize(ClipRow& row) {
    const Counts& c = row.counts;
    row.precision = c.tp + c.fp > 0 ? static_cast<double>(c.tp) / (c.tp + c.fp) : 0.0;
    row.recall = c.tp + c.fn > 0 ? static_cast<double>(c.tp) / (c.tp + c.fn) : 0.0;
    row.f1 = f1_score(row.precision, row.recall);
}

EvalResult f1_suite(std::span<const FrameRecord> records, double iou_thresh, double score_thresh, MatchRule rule) {
    if (records.empty()) throw std::invalid_argument("f1_suite: no frames to evaluate");
    EvalResult result;
    std::map<std::string, ClipRow> clips;
    for (const FrameRecord& r : records) {
        const Counts c = match_frame(above(r.detections, score_thresh), r.truths, iou_thresh, rule);
        result.counts += c;
        ClipRow& row = clips[r.clip_id];
        row.clip_id = r.clip_id;
        row.counts += c;
    }
    ClipRow total{"", result.counts};
    finalize(total);
    result.precision = total.precision;
    result.recall = total.recall;
    result.f1 = total.f1;
    for (auto& [id, row] : clips) {
        finalize(row);
        result.per_clip.push_back(row);
    }
    for (int k = 1; k < 20; ++k) {
        const double thresh = 0.05 * k;
        ClipRow sweep{"", total_counts(records, iou_thresh, thresh, rule)};
        finalize(sweep);
        if (sweep.f1 > result.best_f1) result.best_f1 = sweep.f1, result.best_threshold = thresh;
    }
    return result;
}

double average_precision(std::span<const FrameRecord> records, double iou_thresh) {
    std::set<int> classes;
    for (const FrameRecord& r : records)
        for (const GroundTruth& g : r.truths) classes.insert(g.class_id);
    if (classes.empty()) return 0.0;

    double sum = 0.0;
    for (int cls : classes) {
        struct Scored {
            double score;
            std::size_t order;
            bool tp;
        };
        std::vector<Scored> scored;
        int num_gt = 0;
        std::size_t seq = 0;
        for (const FrameRecord& r : records) {
            std::vector<Detection> dets;
            std::vector<GroundTruth> gts;
            for (const Detection& d : r.detections)
                if (d.class_id == cls) dets.push_back(d);
            for (const GroundTruth& g : r.truths)
                if (g.class_id == cls) gts.push_back(g);
            num_gt += static_cast<int>(gts.size());
            const std::vector<int> assigned = greedy_match(dets, gts, iou_thresh, MatchRule::iou);
            for (std::size_t i = 0; i < dets.size(); ++i) scored.push_back({dets[i].score, seq++, assigned[i] >= 0});
        }
        std::stable_sort(scored.begin(), scored.end(),
                         [](const Scored& a, const Scored& b) { return a.score > b.score; });
        const std::size_t n = scored.size();
        std::vector<double> precision(n), recall(n);
        int tp = 0, fp = 0;
        for (std::size_t i = 0; i < n; ++i) {
            scored[i].tp ? ++tp : ++fp;
            precision[i] = static_cast<double>(tp) / (tp + fp);
            recall[i] = static_cast<double>(tp) / num_gt;
        }
        for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
        double acc = 0.0;
        for (int k = 0; k <= 100; ++k) {
            const double r = k / 100.0;
            const auto it = std::lower_bound(recall.begin(), recall.end(), r);
            if (it != recall.end()) acc += precision[it - recall.begin()];
        }
        sum += acc / 101.0;
    }
    return sum / static_cast<double>(classes.size());
}

std::array<double, 3> ap_suite(std::span<const FrameRecord> records) {
    double acc = 0.0;
    for (int k = 0; k < 10; ++k) acc += average_precision(records, 0.5 + 0.05 * k);
    return {acc / 10.0, average_precision(records, 0.5), average_precision(records, 0.75)};
}

EvalResult evaluate(std::span<const FrameRecord> records, double iou_thresh, double score_thresh, MatchRule rule) {
    EvalResult r = f1_suite(records, iou_thresh, score_thresh, rule);
    const auto [ap, ap50, ap75] = ap_suite(records);
    r.ap = ap;
    r.ap50 = ap50;
    r.ap75 = ap75;
    return r;
}

}  // namespace v2i::eval
