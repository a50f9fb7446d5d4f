#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "v2i/checkpoint.hpp"
#include "v2i/detr.hpp"
#include "v2i/errors.hpp"
#include "v2i/layers.hpp"
#include "v2i/trainer.hpp"

using namespace v2i;
using namespace v2i::detr;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model(bool msi = false, int frames = 1) {
    ModelConfig c;
    c.d = 32;
    c.num_queries = 10;
    c.heads = 4;
    c.msi = msi;
    c.frames = frames;
    c.msi_heads = 4;
    return c;
}

}  // namespace

TEST(Backbone, PyramidShapes) {
    torch::manual_seed(0);
    ModelConfig cfg = small_model();
    cfg.d = 64;
    Backbone bb(cfg);
    const auto p = bb->forward(torch::rand({1, 128, 128}));
    const std::array<std::int64_t, 4> sizes{32, 16, 8, 4};
    for (int l = 0; l < 4; ++l) {
        EXPECT_EQ(p.levels[l].sizes(), torch::IntArrayRef({64, sizes[l], sizes[l]}));
        EXPECT_EQ(p.strides[l], kStrides[l]);
    }
    EXPECT_EQ(bb->forward_last(torch::rand({2, 1, 64, 64})).sizes(), torch::IntArrayRef({2, 64, 2, 2}));
}

TEST(Backbone, PureAndFiniteOnZeros) {
    torch::manual_seed(1);
    Backbone bb(small_model());
    bb->eval();
    const auto img = torch::rand({1, 64, 96});
    const auto a = bb->forward(img), b = bb->forward(img);
    for (int l = 0; l < 4; ++l) EXPECT_TRUE(torch::equal(a.levels[l], b.levels[l]));
    const auto z = bb->forward(torch::zeros({1, 64, 64}));
    for (int l = 0; l < 4; ++l) EXPECT_TRUE(torch::isfinite(z.levels[l]).all().item<bool>());
}

TEST(Backbone, RejectsSizesNotDivisibleBy32) {
    Backbone bb(small_model());
    EXPECT_THROW(bb->forward(torch::rand({1, 100, 128})), ShapeError);
}

TEST(Encoder, TokenCountAndDepthZeroIdentity) {
    torch::manual_seed(2);
    Encoder enc(64, 8, 256, 2);
    const auto level = torch::randn({1, 64, 4, 4});
    const auto out = enc->forward(level);
    EXPECT_EQ(out.sizes(), torch::IntArrayRef({1, 16, 64}));
    EXPECT_TRUE(torch::isfinite(out).all().item<bool>());

    Encoder none(64, 8, 256, 0);
    const auto expect = level.flatten(2).transpose(1, 2) + sine_position_2d(4, 4, 64).unsqueeze(0);
    EXPECT_TRUE(torch::allclose(none->forward(level), expect, 0, 0));
}

TEST(Decoder, PermutationEquivariantOverQueries) {
    torch::manual_seed(3);
    Decoder dec(32, 4, 128, 2, false);
    dec->eval();
    const auto q = torch::randn({1, 7, 32}), mem = torch::randn({1, 16, 32});
    const auto perm = torch::randperm(7);
    const auto a = dec->forward(q, mem).back();
    const auto b = dec->forward(q.index_select(1, perm), mem).back();
    EXPECT_TRUE(torch::allclose(a.index_select(1, perm), b, 1e-5, 1e-5));
}

TEST(Decoder, SingleAndDuplicatedQueries) {
    torch::manual_seed(4);
    Decoder dec(32, 4, 128, 2, false);
    const auto mem = torch::randn({1, 16, 32});
    const auto one = dec->forward(torch::randn({1, 1, 32}), mem).back();
    EXPECT_EQ(one.sizes(), torch::IntArrayRef({1, 1, 32}));
    EXPECT_TRUE(torch::isfinite(one).all().item<bool>());
    auto row = torch::randn({1, 1, 32});
    const auto dup = dec->forward(torch::cat({row, torch::randn({1, 1, 32}), row}, 1), mem).back();
    EXPECT_TRUE(torch::equal(dup[0][0], dup[0][2]));
}

TEST(Heads, RangeCountAndConstantInput) {
    torch::manual_seed(5);
    Heads heads(32, 2);
    const auto out = heads->forward(torch::randn({1, 9, 32}) * 10);
    EXPECT_EQ(out.boxes.sizes(), torch::IntArrayRef({1, 9, 4}));
    EXPECT_EQ(out.class_logits.sizes(), torch::IntArrayRef({1, 9, 3}));
    EXPECT_GE(out.boxes.min().item<double>(), 0.0);
    EXPECT_LE(out.boxes.max().item<double>(), 1.0);
    const auto zero = heads->forward(torch::zeros({1, 4, 32}));
    for (int i = 1; i < 4; ++i) {
        EXPECT_TRUE(torch::equal(zero.boxes[0][0], zero.boxes[0][i]));
        EXPECT_TRUE(torch::equal(zero.class_logits[0][0], zero.class_logits[0][i]));
    }
}

TEST(Detector, ForwardShapesForBothRoles) {
    torch::manual_seed(6);
    Detector student(small_model());
    const auto s = student->forward_image(torch::rand({2, 1, 64, 64}));
    EXPECT_EQ(s.detections.size(), 2u);
    EXPECT_EQ(s.detections.back().boxes.sizes(), torch::IntArrayRef({2, 10, 4}));
    EXPECT_EQ(s.memory.sizes(), torch::IntArrayRef({2, 4, 32}));

    Detector teacher(small_model(true, 3));
    const auto t = teacher->forward_window(torch::rand({2, 3, 1, 64, 64}), {1, 0});
    EXPECT_EQ(t.detections.back().boxes.sizes(), torch::IntArrayRef({2, 10, 4}));
    EXPECT_EQ(t.frame_queries.sizes(), torch::IntArrayRef({3, 10, 32}));
    EXPECT_THROW(teacher->forward_window(torch::rand({1, 2, 1, 64, 64}), {0}), ShapeError);
}

TEST(Detector, SingleFrameTeacherIsAnImageDetector) {
    torch::manual_seed(7);
    Detector teacher(small_model(true, 1));
    teacher->eval();
    const auto img = torch::rand({1, 1, 64, 64});
    const auto a = teacher->forward_window(img.unsqueeze(1), {0});
    EXPECT_EQ(a.detections.back().boxes.sizes(), torch::IntArrayRef({1, 10, 4}));
    EXPECT_TRUE(torch::isfinite(a.detections.back().class_logits).all().item<bool>());
}

TEST(Inference, DeterministicAndBatchConsistent) {
    torch::manual_seed(8);
    Detector model(small_model());
    model->eval();
    const auto img = torch::rand({1, 64, 64});
    const auto a = train::inference(*model, img, 0, 0.0, 5), b = train::inference(*model, img, 0, 0.0, 5);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].box, b[i].box);
        EXPECT_EQ(a[i].score, b[i].score);
    }
    torch::NoGradGuard ng;
    const auto single = model->forward_image(img.unsqueeze(0)).detections.back();
    const auto batch = model->forward_image(torch::stack({img, torch::rand({1, 64, 64})})).detections.back();
    EXPECT_TRUE(torch::allclose(single.boxes[0], batch.boxes[0], 1e-5, 1e-6));
    EXPECT_TRUE(torch::allclose(single.class_logits[0], batch.class_logits[0], 1e-5, 1e-5));
    const auto noise = train::inference(*model, torch::rand({1, 64, 64}) * 50 - 25, 0, 0.5, 100);
    for (const auto& d : noise) EXPECT_TRUE(std::isfinite(d.score) && std::isfinite(d.box.x_min));
}

TEST(Checkpoint, RoundTripAndCorruption) {
    torch::manual_seed(9);
    Detector model(small_model(true, 3));
    const fs::path path = fs::temp_directory_path() / ("v2i_ckpt_" + std::to_string(::getpid()) + ".ckpt");
    CheckpointHeader h{"teacher", model->config(), 42, 7, {{"f1", 0.5}}};
    save_checkpoint(path, h, *model);
    CheckpointHeader back;
    Detector loaded = load_detector(path, &back);
    EXPECT_EQ(back.role, "teacher");
    EXPECT_EQ(back.config_hash, 42u);
    EXPECT_EQ(back.seed, 7u);
    EXPECT_EQ(back.model.hash(), model->config().hash());
    EXPECT_EQ(parameter_checksum(*loaded), parameter_checksum(*model));

    model->eval();
    const auto w = torch::rand({1, 3, 1, 64, 64});
    torch::NoGradGuard ng;
    EXPECT_TRUE(torch::equal(model->forward_window(w, {1}).detections.back().boxes,
                             loaded->forward_window(w, {1}).detections.back().boxes));

    // Flip one payload byte: the checksum must catch it.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(0, std::ios::end);
        const auto size = static_cast<std::streamoff>(f.tellg());
        f.seekp(size / 2);
        char c = 0;
        f.seekg(size / 2);
        f.read(&c, 1);
        c ^= 0x5a;
        f.seekp(size / 2);
        f.write(&c, 1);
    }
    EXPECT_THROW(read_checkpoint(path), IoError);
    fs::resize_file(path, 20);
    EXPECT_THROW(read_checkpoint(path), IoError);
    fs::remove(path);

    Detector other(small_model(false, 1));
    const fs::path p2 = fs::temp_directory_path() / ("v2i_ckpt2_" + std::to_string(::getpid()) + ".ckpt");
    save_checkpoint(p2, {"student", other->config(), 0, 0, {}}, *other);
    EXPECT_THROW(load_into(read_checkpoint(p2), *model), ConfigError);
    fs::remove(p2);
}
