#include <gtest/gtest.h>

#include <random>
#include <set>

#include "oracles.hpp"
#include "v2i/detr.hpp"
#include "v2i/errors.hpp"
#include "v2i/matcher.hpp"

using namespace v2i;
using namespace v2i::detr;

namespace {

DetectionSet random_preds(int n, int classes, std::uint64_t seed, torch::Dtype dtype = torch::kFloat) {
    torch::manual_seed(seed);
    auto centers = torch::rand({n, 2}, dtype) * 0.6 + 0.2;
    auto sizes = torch::rand({n, 2}, dtype) * 0.2 + 0.05;
    return {torch::cat({centers, sizes}, 1), torch::randn({n, classes + 1}, dtype)};
}

Target random_targets(int g, int classes, std::uint64_t seed, torch::Dtype dtype = torch::kFloat) {
    torch::manual_seed(seed + 1000);
    auto centers = torch::rand({g, 2}, dtype) * 0.6 + 0.2;
    auto sizes = torch::rand({g, 2}, dtype) * 0.2 + 0.05;
    return {torch::cat({centers, sizes}, 1), torch::randint(0, classes, {g}, torch::kLong)};
}

}  // namespace

TEST(Assignment, MatchesBruteForceOnRandomMatrices) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> dim(1, 6);
    std::uniform_real_distribution<double> val(-5, 5);
    for (int trial = 0; trial < 300; ++trial) {
        const int rows = dim(rng), cols = dim(rng);
        std::vector<double> cost(rows * cols);
        for (double& c : cost) c = val(rng);
        const auto assign = solve_assignment(cost, rows, cols);
        ASSERT_EQ(static_cast<int>(assign.size()), rows);
        std::set<int> used;
        int assigned = 0;
        for (int a : assign)
            if (a >= 0) {
                EXPECT_TRUE(used.insert(a).second);
                EXPECT_LT(a, cols);
                ++assigned;
            }
        EXPECT_EQ(assigned, std::min(rows, cols));
        EXPECT_EQ(oracle::assignment_cost(cost, cols, assign), oracle::brute_force_min_cost(cost, rows, cols));
    }
}

TEST(Assignment, ObviousThreeByTwo) {
    // Query 1 fits target 0, query 2 fits target 1; query 0 is expensive.
    const std::vector<double> cost{9, 9, 0.1, 5, 4, 0.2};
    const auto assign = solve_assignment(cost, 3, 2);
    EXPECT_EQ(assign, (std::vector<int>{-1, 0, 1}));
}

TEST(Hungarian, EmptyTargetsGiveNoPairs) {
    const auto pred = random_preds(5, 1, 0);
    const Target empty{torch::zeros({0, 4}), torch::zeros({0}, torch::kLong)};
    EXPECT_TRUE(hungarian_match(pred, empty).pairs.empty());
}

TEST(Hungarian, PartialInjectionOfMinSize) {
    for (int g : {1, 3, 7}) {
        const auto pred = random_preds(5, 2, g);
        const auto tgt = random_targets(g, 2, g);
        const auto m = hungarian_match(pred, tgt);
        EXPECT_EQ(static_cast<int>(m.pairs.size()), std::min(5, g));
        std::set<int> qs, ts;
        for (auto [q, t] : m.pairs) {
            EXPECT_TRUE(qs.insert(q).second);
            EXPECT_TRUE(ts.insert(t).second);
        }
    }
}

TEST(Hungarian, MinimizesTheMatchingCost) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const int n = 2 + seed % 5, g = 1 + seed % 4;
        const auto pred = random_preds(n, 2, seed, torch::kDouble);
        const auto tgt = random_targets(g, 2, seed, torch::kDouble);
        const auto c = matching_cost(pred, tgt, {}).contiguous();
        std::vector<double> cost(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
        // Manual cost of one entry from the stated formula.
        const auto probs = torch::softmax(pred.class_logits, -1);
        const auto xyxy_p = box_cxcywh_to_xyxy(pred.boxes), xyxy_t = box_cxcywh_to_xyxy(tgt.boxes);
        const PixelBox pb{xyxy_p[0][0].item<double>(), xyxy_p[0][1].item<double>(), xyxy_p[0][2].item<double>(),
                          xyxy_p[0][3].item<double>()};
        const PixelBox tb{xyxy_t[0][0].item<double>(), xyxy_t[0][1].item<double>(), xyxy_t[0][2].item<double>(),
                          xyxy_t[0][3].item<double>()};
        const double manual = -2.0 * probs[0][tgt.labels[0].item<long>()].item<double>() +
                              5.0 * (pred.boxes[0] - tgt.boxes[0]).abs().sum().item<double>() - 2.0 * giou(pb, tb);
        EXPECT_NEAR(cost[0], manual, 1e-9);

        const auto m = hungarian_match(pred, tgt);
        std::vector<int> assign(n, -1);
        for (auto [q, t] : m.pairs) assign[q] = t;
        EXPECT_EQ(oracle::assignment_cost(cost, g, assign), oracle::brute_force_min_cost(cost, n, g));
    }
}

TEST(DetectionLoss, NearZeroAtTheOptimum) {
    const auto tgt = random_targets(2, 1, 4);
    auto logits = torch::full({4, 2}, -20.0);
    logits.index_put_({torch::indexing::Slice(), 1}, 20.0);  // no-object everywhere
    logits[0][0] = 20.0, logits[0][1] = -20.0;
    logits[2][0] = 20.0, logits[2][1] = -20.0;
    auto boxes = torch::rand({4, 4}) * 0.1 + 0.3;
    boxes[0] = tgt.boxes[0];
    boxes[2] = tgt.boxes[1];
    const DetectionSet pred{boxes, logits};
    const auto m = hungarian_match(pred, {tgt.boxes, torch::zeros({2}, torch::kLong)});
    const auto loss = detection_loss(pred, {tgt.boxes, torch::zeros({2}, torch::kLong)}, m);
    EXPECT_LT(loss.total.item<double>(), 1e-3);
}

TEST(DetectionLoss, EmptyTargetsLeaveOnlyNoObjectTerm) {
    const auto pred = random_preds(4, 1, 9);
    const Target empty{torch::zeros({0, 4}), torch::zeros({0}, torch::kLong)};
    const auto loss = detection_loss(pred, empty, hungarian_match(pred, empty));
    EXPECT_EQ(loss.l1.item<double>(), 0.0);
    EXPECT_EQ(loss.giou.item<double>(), 0.0);
    const auto expected = torch::nn::functional::cross_entropy(pred.class_logits, torch::ones({4}, torch::kLong));
    EXPECT_NEAR(loss.total.item<double>(), 2.0 * expected.item<double>(), 1e-5);
}

TEST(DetectionLoss, MovingMatchedBoxTowardTargetLowersLoss) {
    const auto tgt = random_targets(1, 1, 12, torch::kDouble);
    auto pred = random_preds(3, 1, 12, torch::kDouble);
    const auto m = hungarian_match(pred, tgt);
    const int q = m.pairs.at(0).first;
    auto loss_at = [&](double shift) {
        auto boxes = pred.boxes.clone();
        boxes[q] = tgt.boxes[0].clone();
        boxes[q][0] += shift;
        return detection_loss({boxes, pred.class_logits}, tgt, m).total.item<double>();
    };
    EXPECT_LT(loss_at(0.05), loss_at(0.1));
    EXPECT_LT(loss_at(0.01), loss_at(0.05));
}

TEST(DetectionLoss, BoxGradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto tgt = random_targets(3, 2, seed, torch::kDouble);
        const auto pred = random_preds(5, 2, seed, torch::kDouble);
        const auto m = hungarian_match(pred, tgt);
        auto boxes = pred.boxes.clone().requires_grad_(true);
        detection_loss({boxes, pred.class_logits}, tgt, m).total.backward();
        auto f = [&](const torch::Tensor& b) {
            return detection_loss({b, pred.class_logits}, tgt, m).total.item<double>();
        };
        const auto numeric = oracle::numeric_gradient(f, pred.boxes, 1e-6);
        EXPECT_LT(oracle::relative_error(boxes.grad(), numeric), 1e-3) << "seed " << seed;
    }
}

TEST(Assignment, NonFiniteCostIsADivergence) {
    const std::vector<double> cost{1, std::nan(""), 2, 3};
    EXPECT_THROW(solve_assignment(cost, 2, 2), DivergenceError);
}
