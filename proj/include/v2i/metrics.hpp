#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "v2i/box.hpp"

namespace v2i::eval {

struct Detection {
    PixelBox box;
    double score = 0.0;
    int class_id = 0;
};

struct GroundTruth {
    PixelBox box;
    int class_id = 0;
};

enum class MatchRule { iou, centroid_in_box };

struct Counts {
    int tp = 0;
    int fp = 0;
    int fn = 0;

    Counts& operator+=(const Counts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
};

// Greedy score-ordered matching: each detection takes the highest-IoU
// unmatched ground truth of its class that passes the rule. Equal scores keep
// detection order.
Counts match_frame(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_thresh,
                   MatchRule rule = MatchRule::iou);

// Predictions and ground truth for one frame.
struct FrameRecord {
    std::string clip_id;
    int frame = 0;
    std::vector<Detection> detections;
    std::vector<GroundTruth> truths;
};

struct ClipRow {
    std::string clip_id;
    Counts counts;
    double precision = 0, recall = 0, f1 = 0;
};

struct EvalResult {
    double precision = 0, recall = 0, f1 = 0;
    double ap = 0, ap50 = 0, ap75 = 0;
    // Best F1 over score thresholds, reported separately from the fixed one.
    double best_f1 = 0, best_threshold = 0;
    Counts counts;
    std::vector<ClipRow> per_clip;
};

// f1 = 2pr/(p+r) when p+r > 0, else 0. Empty denominators give 0.
double f1_score(double precision, double recall);
void finalize(ClipRow& row);

// Precision/recall/F1 over all frames with detections at or above
// score_thresh. Throws std::invalid_argument on an empty record set.
EvalResult f1_suite(std::span<const FrameRecord> records, double iou_thresh = 0.5, double score_thresh = 0.5,
                    MatchRule rule = MatchRule::iou);

// COCO-style 101-point interpolated AP at one IoU threshold, averaged over
// classes that have ground truth.
double average_precision(std::span<const FrameRecord> records, double iou_thresh);

// {AP over 0.50:0.05:0.95, AP50, AP75}.
std::array<double, 3> ap_suite(std::span<const FrameRecord> records);

// Both protocols in one result.
EvalResult evaluate(std::span<const FrameRecord> records, double iou_thresh = 0.5, double score_thresh = 0.5,
                    MatchRule rule = MatchRule::iou);

}  // namespace v2i::eval
