#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "v2i/metrics.hpp"

using namespace v2i;
using namespace v2i::eval;

namespace {

// Tiny instance: up to 10 detections and 5 truths over a few frames, with
// distinct scores and boxes packed closely enough to overlap often.
std::vector<FrameRecord> random_instance(std::mt19937_64& rng, int classes) {
    std::uniform_int_distribution<int> frames_d(1, 3), cls(0, classes - 1);
    std::uniform_real_distribution<double> pos(0, 12), size(3, 8), score(0, 1);
    const int frames = frames_d(rng);
    std::vector<FrameRecord> recs(frames);
    for (int f = 0; f < frames; ++f) recs[f].clip_id = "c" + std::to_string(f % 2), recs[f].frame = f;
    const int dets = std::uniform_int_distribution<int>(0, 10)(rng);
    const int gts = std::uniform_int_distribution<int>(1, 5)(rng);
    auto box = [&] {
        const double x = pos(rng), y = pos(rng);
        return PixelBox{x, y, x + size(rng), y + size(rng)};
    };
    std::uniform_int_distribution<int> which(0, frames - 1);
    for (int g = 0; g < gts; ++g) recs[which(rng)].truths.push_back({box(), cls(rng)});
    for (int d = 0; d < dets; ++d) recs[which(rng)].detections.push_back({box(), score(rng), cls(rng)});
    return recs;
}

}  // namespace

TEST(AveragePrecision, MatchesBruteForceIntegration) {
    std::mt19937_64 rng(0);
    for (int trial = 0; trial < 500; ++trial) {
        const auto recs = random_instance(rng, 1 + trial % 2);
        for (double thr : {0.5, 0.75, 0.3})
            ASSERT_NEAR(average_precision(recs, thr), oracle::brute_force_ap(recs, thr), 1e-9) << "trial " << trial;
    }
}

TEST(AveragePrecision, SimpleCases) {
    const PixelBox b{10, 10, 30, 30};
    std::vector<FrameRecord> perfect{{"c", 0, {{b, 0.9, 0}}, {{b, 0}}}};
    const auto [ap, ap50, ap75] = ap_suite(perfect);
    EXPECT_DOUBLE_EQ(ap50, 1.0);
    EXPECT_DOUBLE_EQ(ap75, 1.0);
    EXPECT_DOUBLE_EQ(ap, 1.0);
    std::vector<FrameRecord> wrong{{"c", 0, {{{50, 50, 60, 60}, 0.9, 0}}, {{b, 0}}}};
    EXPECT_EQ(average_precision(wrong, 0.5), 0.0);
}

TEST(AveragePrecision, SuiteLiesWithinThresholdRange) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const auto recs = random_instance(rng, 1);
        double lo = 1, hi = 0;
        for (int k = 0; k < 10; ++k) {
            const double v = average_precision(recs, 0.5 + 0.05 * k);
            lo = std::min(lo, v), hi = std::max(hi, v);
        }
        const double ap = ap_suite(recs)[0];
        EXPECT_GE(ap, lo - 1e-12);
        EXPECT_LE(ap, hi + 1e-12);
    }
}

TEST(MatchFrame, HandTracedCases) {
    const PixelBox gt{0, 0, 10, 10};
    const std::vector<GroundTruth> gts{{gt, 0}};
    // Both detections reach IoU 0.7 with the single truth.
    const std::vector<Detection> dets{{{0, 0, 10, 7}, 0.9, 0}, {{0, 3, 10, 10}, 0.8, 0}};
    const Counts c = match_frame(dets, gts, 0.5);
    EXPECT_EQ(c.tp, 1);
    EXPECT_EQ(c.fp, 1);
    EXPECT_EQ(c.fn, 0);
    const Counts none = match_frame({}, gts, 0.5);
    EXPECT_EQ(none.fn, 1);
    EXPECT_EQ(none.tp, 0);
    const Counts perfect = match_frame(std::vector<Detection>{{gt, 0.5, 0}}, gts, 0.5);
    EXPECT_EQ(perfect.tp, 1);
    EXPECT_EQ(perfect.fp + perfect.fn, 0);
}

TEST(MatchFrame, EqualScoresKeepDetectionOrder) {
    const std::vector<GroundTruth> gts{{{0, 0, 10, 10}, 0}};
    const Detection loose{{0, 0, 10, 6}, 0.5, 0}, tight{{0, 0, 10, 9}, 0.5, 0};
    // The first detection wins the truth; its IoU decides whether it counts.
    EXPECT_EQ(match_frame(std::vector<Detection>{loose, tight}, gts, 0.65).tp, 1);
    EXPECT_EQ(match_frame(std::vector<Detection>{loose, tight}, gts, 0.5).fp, 1);
    EXPECT_EQ(match_frame(std::vector<Detection>{tight, loose}, gts, 0.5).fp, 1);
}

TEST(MatchFrame, CentroidRule) {
    const std::vector<GroundTruth> gts{{{0, 0, 10, 10}, 0}};
    // IoU is tiny but the centre lies inside the truth.
    const std::vector<Detection> dets{{{4, 4, 6, 6}, 0.9, 0}};
    EXPECT_EQ(match_frame(dets, gts, 0.5, MatchRule::iou).tp, 0);
    EXPECT_EQ(match_frame(dets, gts, 0.5, MatchRule::centroid_in_box).tp, 1);
}

TEST(F1Suite, ArithmeticAndDegenerateCases) {
    EXPECT_DOUBLE_EQ(f1_score(0.8, 0.8), 0.8);
    EXPECT_EQ(f1_score(0, 0), 0.0);
    ClipRow row{"x", {8, 2, 2}};
    finalize(row);
    EXPECT_DOUBLE_EQ(row.precision, 0.8);
    EXPECT_DOUBLE_EQ(row.recall, 0.8);
    EXPECT_NEAR(row.f1, 0.8, 1e-12);

    const PixelBox b{0, 0, 10, 10};
    std::vector<FrameRecord> exact{{"a", 0, {{b, 0.9, 0}}, {{b, 0}}}, {"b", 0, {{b, 0.9, 0}}, {{b, 0}}}};
    const auto r = f1_suite(exact);
    EXPECT_DOUBLE_EQ(r.f1, 1.0);
    EXPECT_EQ(r.per_clip.size(), 2u);

    std::vector<FrameRecord> silent{{"a", 0, {}, {{b, 0}}}};
    const auto s = f1_suite(silent);
    EXPECT_EQ(s.precision, 0.0);
    EXPECT_EQ(s.recall, 0.0);
    EXPECT_EQ(s.f1, 0.0);
    // Detections below the score threshold do not count.
    std::vector<FrameRecord> low{{"a", 0, {{b, 0.3, 0}}, {{b, 0}}}};
    EXPECT_EQ(f1_suite(low).counts.tp, 0);
    EXPECT_THROW(f1_suite({}), std::invalid_argument);
}

TEST(F1Suite, BoundedZeroIffNoTruePositiveAndMonotoneRecall) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 300; ++trial) {
        auto recs = random_instance(rng, 1);
        for (auto& r : recs)
            for (auto& d : r.detections) d.score = 0.5 + 0.5 * d.score;
        const auto res = f1_suite(recs);
        EXPECT_GE(res.f1, 0.0);
        EXPECT_LE(res.f1, 1.0);
        EXPECT_EQ(res.f1 == 0.0, res.counts.tp == 0);
        EXPECT_NEAR(res.f1, f1_score(res.precision, res.recall), 1e-12);

        // A lower-scored duplicate of a truth never lowers recall.
        auto more = recs;
        for (auto& r : more)
            if (!r.truths.empty()) {
                r.detections.push_back({r.truths[0].box, 0.5, r.truths[0].class_id});
                break;
            }
        EXPECT_GE(f1_suite(more).recall, res.recall);
    }
}
