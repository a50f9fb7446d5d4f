#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "v2i/checkpoint.hpp"
#include "v2i/config.hpp"
#include "v2i/errors.hpp"
#include "v2i/trainer.hpp"

using namespace v2i;
using namespace v2i::train;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// A few small clips and a fast model; every test trains for a handful of steps.
ExperimentConfig tiny(std::vector<std::string> extra = {}) {
    std::vector<std::string> o{"data.num_clips=2",   "data.clip_length=4", "data.height=64", "data.width=64",
                               "data.test_clips=1",  "model.d=32",         "model.heads=4",  "model.msi_heads=4",
                               "train.N=12",         "train.batch_size=2", "train.max_steps=6"};
    o.insert(o.end(), extra.begin(), extra.end());
    return load_config("", o);
}

data::Dataset train_split(const ExperimentConfig& cfg) { return data::Dataset::generate(cfg.data); }

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("v2i_trainer_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

std::vector<json> read_log(const fs::path& p) {
    std::vector<json> rows;
    std::ifstream f(p);
    for (std::string line; std::getline(f, line);) rows.push_back(json::parse(line));
    return rows;
}

detr::Detector trained_teacher(const ExperimentConfig& cfg, const data::Dataset& ds) {
    RunOptions opt;
    opt.out_dir = temp_dir("teacher");
    const auto r = train_teacher(ds, cfg, opt);
    return load_detector(r.checkpoint);
}

}  // namespace

TEST(TotalLoss, WeightedSum) {
    EXPECT_DOUBLE_EQ(total_loss({2.0, 0.5, -0.8, 1.0, 5.0, 0}), -1.5);
    EXPECT_EQ(total_loss({0, 0, 0, 1, 5, 0}), 0.0);
    EXPECT_EQ(total_loss({1.0, 2.0, 3.0, 1.0, 0.0, 0}), total_loss({1.0, 2.0, -7.0, 1.0, 0.0, 0}));
    EXPECT_THROW(total_loss({std::nan(""), 0, 0, 1, 5, 0}), DivergenceError);
    EXPECT_THROW(total_loss({0, INFINITY, 0, 1, 5, 0}), DivergenceError);
}

TEST(Batching, WindowsAndTargets) {
    const auto cfg = tiny();
    const auto ds = train_split(cfg);
    const auto samples = all_samples(ds);
    EXPECT_EQ(static_cast<int>(samples.size()), ds.num_frames());
    const auto b = make_batch(ds, std::span<const Sample>(samples.data(), 3), 3);
    EXPECT_EQ(b.windows.sizes(), torch::IntArrayRef({3, 3, 1, 64, 64}));
    EXPECT_EQ(b.images.sizes(), torch::IntArrayRef({3, 1, 64, 64}));
    EXPECT_EQ(b.targets.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i)
        EXPECT_TRUE(torch::equal(b.images[i], b.windows[i][b.current[i]]));
}

TEST(StudentLosses, OptimizedTotalMatchesLoggedParts) {
    const auto cfg = tiny();
    const auto ds = train_split(cfg);
    seed_everything(1);
    detr::Detector teacher(cfg.teacher_model()), student(cfg.student_model());
    teacher->eval();
    const auto samples = all_samples(ds);
    const auto b = make_batch(ds, std::span<const Sample>(samples.data(), 2), cfg.train.T);
    const auto s = student_losses(*student, *teacher, b, cfg, 3);
    EXPECT_EQ(s.parts.lambda_bk, 1.0);
    EXPECT_EQ(s.parts.lambda_qe, 5.0);
    EXPECT_NEAR(s.parts.total, s.parts.l_det + s.parts.l_bk + 5 * s.parts.l_qe, 1e-12);
    EXPECT_NEAR(s.total.item<double>(), s.parts.total, 1e-5 * std::max(1.0, std::abs(s.parts.total)));
    EXPECT_GE(s.parts.l_qe, -1.0);
    EXPECT_LE(s.parts.l_qe, 1.0);
}

TEST(StudentLosses, FeatureDistillationAloneReachesTheBackbone) {
    auto cfg = tiny({"train.cost_class=0", "train.cost_l1=0", "train.cost_giou=0", "distill.cqd=false"});
    const auto ds = train_split(cfg);
    seed_everything(2);
    detr::Detector teacher(cfg.teacher_model()), student(cfg.student_model());
    teacher->eval();
    const auto samples = all_samples(ds);
    const auto b = make_batch(ds, std::span<const Sample>(samples.data(), 2), cfg.train.T);
    student_losses(*student, *teacher, b, cfg, 0).total.backward();
    double backbone = 0;
    for (const auto& p : student->backbone->parameters())
        if (p.grad().defined()) backbone += p.grad().abs().sum().item<double>();
    EXPECT_GT(backbone, 0.0);
    for (const auto& p : teacher->parameters()) EXPECT_FALSE(p.grad().defined() && p.grad().abs().sum().item<double>() > 0);
}

TEST(Distill, LoggedTotalsAndFrozenTeacher) {
    const auto cfg = tiny();
    const auto ds = train_split(cfg);
    auto teacher = trained_teacher(cfg, ds);
    const auto before = parameter_checksum(*teacher);
    RunOptions opt;
    opt.out_dir = temp_dir("frozen");
    int checked = 0;
    opt.after_backward = [&](int) {
        for (const auto& p : teacher->parameters())
            if (p.grad().defined()) EXPECT_EQ(p.grad().abs().max().item<double>(), 0.0);
        ++checked;
    };
    const auto r = distill_student(ds, teacher, cfg, opt);
    EXPECT_EQ(checked, cfg.train.max_steps);
    EXPECT_EQ(parameter_checksum(*teacher), before);
    const auto rows = read_log(r.log);
    ASSERT_EQ(static_cast<int>(rows.size()), cfg.train.max_steps);
    for (const auto& row : rows) {
        const double expect = row["l_det"].get<double>() + row["l_bk"].get<double>() + 5 * row["l_qe"].get<double>();
        EXPECT_NEAR(row["total"].get<double>(), expect, 1e-6);
        for (const char* k : {"step", "l_det", "l_bk", "l_qe", "total", "lr"}) EXPECT_TRUE(row.contains(k));
    }
    CheckpointHeader h;
    auto student = load_detector(r.checkpoint, &h);
    EXPECT_EQ(h.role, "student");
    EXPECT_EQ(student->config().frames, 1);
    EXPECT_FALSE(student->config().msi);
}

TEST(Distill, ZeroWeightsEqualPlainTraining) {
    const auto cfg = tiny({"distill.lambda_bk=0", "distill.lambda_qe=0"});
    const auto plain_cfg = tiny({"distill.tfd=false", "distill.cqd=false"});
    const auto ds = train_split(cfg);
    auto teacher = trained_teacher(cfg, ds);
    std::vector<double> a, b;
    RunOptions oa, ob;
    oa.on_step = [&](int, const LossBreakdown& p) { a.push_back(p.l_det); };
    ob.on_step = [&](int, const LossBreakdown& p) { b.push_back(p.l_det); };
    const auto ra = distill_student(ds, teacher, cfg, oa);
    const auto rb = distill_student(ds, detr::Detector(nullptr), plain_cfg, ob);
    EXPECT_EQ(a, b);
    EXPECT_EQ(ra.parameter_checksum, rb.parameter_checksum);
}

TEST(Distill, SeedDeterminism) {
    const auto cfg = tiny();
    const auto ds = train_split(cfg);
    auto teacher = trained_teacher(cfg, ds);
    const auto r1 = distill_student(ds, teacher, cfg, {});
    const auto r2 = distill_student(ds, teacher, cfg, {});
    EXPECT_EQ(r1.parameter_checksum, r2.parameter_checksum);
    EXPECT_EQ(r1.metrics.dump(), r2.metrics.dump());
    const auto r3 = distill_student(ds, teacher, tiny({"seed=1"}), {});
    EXPECT_NE(r1.parameter_checksum, r3.parameter_checksum);
}

TEST(Distill, IncompatibleTeacherIsAConfigError) {
    const auto cfg = tiny();
    const auto ds = train_split(cfg);
    auto teacher = trained_teacher(cfg, ds);
    EXPECT_THROW(distill_student(ds, teacher, tiny({"model.d=64"}), {}), ConfigError);
    EXPECT_THROW(distill_student(ds, teacher, tiny({"train.N=10"}), {}), ConfigError);
    EXPECT_THROW(distill_student(ds, teacher, tiny({"train.T=2"}), {}), ConfigError);
    EXPECT_THROW(distill_student(ds, detr::Detector(nullptr), cfg, {}), ConfigError);
}

TEST(Distill, TrainableTeacherIsFineTuned) {
    const auto cfg = tiny({"teacher.trainable=true", "train.max_steps=2"});
    const auto ds = train_split(cfg);
    auto teacher = trained_teacher(cfg, ds);
    const auto before = parameter_checksum(*teacher);
    distill_student(ds, teacher, cfg, {});
    EXPECT_NE(parameter_checksum(*teacher), before);
}

TEST(Distill, VariantsRun) {
    const auto ds = train_split(tiny());
    auto teacher = trained_teacher(tiny(), ds);
    for (const char* v : {"vanilla", "gt_hard_mask", "attention_mask"}) {
        const auto cfg = tiny({std::string("distill.fd_variant=") + v, "train.max_steps=2"});
        EXPECT_NO_THROW(distill_student(ds, teacher, cfg, {})) << v;
    }
    for (const char* m : {"all_TN", "half_TN"})
        EXPECT_NO_THROW(distill_student(ds, teacher, tiny({std::string("distill.count_mode=") + m, "train.max_steps=2"}), {}));
    auto plain_teacher = trained_teacher(tiny({"teacher.msi=false"}), ds);
    EXPECT_NO_THROW(distill_student(ds, plain_teacher, tiny({"teacher.msi=false", "train.max_steps=2"}), {}));
}

TEST(Training, DivergenceWritesADump) {
    const auto cfg = tiny({"distill.tfd=false", "distill.cqd=false"});
    auto clips = train_split(cfg).clips();
    for (auto& c : clips) std::fill(c.pixels.begin(), c.pixels.end(), std::nanf(""));
    const data::Dataset broken(clips, 0);
    RunOptions opt;
    opt.out_dir = temp_dir("diverge");
    EXPECT_THROW(distill_student(broken, detr::Detector(nullptr), cfg, opt), DivergenceError);
    EXPECT_TRUE(fs::exists(opt.out_dir / "divergence_dump.json"));
}

TEST(Training, TeacherEpochsOverrideOnlyTheTeacher) {
    // 8 frames in batches of 2: 4 steps per epoch.
    const auto cfg = tiny({"train.max_steps=0", "train.epochs=1", "teacher.epochs=2"});
    const auto ds = train_split(cfg);
    RunOptions opt;
    opt.out_dir = temp_dir("teacher_epochs");
    const auto t = train_teacher(ds, cfg, opt);
    EXPECT_EQ(t.steps, 8);
    const auto s = distill_student(ds, load_detector(t.checkpoint), cfg, {});
    EXPECT_EQ(s.steps, 4);
    EXPECT_EQ(train_teacher(ds, tiny({"train.max_steps=0", "train.epochs=1"}), {}).steps, 4);
}

TEST(Training, CheckpointReproducesEvaluation) {
    const auto cfg = tiny();
    const auto ds = train_split(cfg);
    RunOptions opt;
    opt.out_dir = temp_dir("roundtrip");
    opt.validation = &ds;
    const auto r = train_teacher(ds, cfg, opt);
    auto loaded = load_detector(r.checkpoint);
    EXPECT_EQ(to_json(evaluate_model(*loaded, ds, cfg.eval)).dump(), r.metrics["val"].dump());
}

TEST(Training, TeacherOverfitsOneClip) {
    // One clean clip with one lesion: the teacher should fit it quickly.
    const auto cfg = load_config("", {"data.num_clips=1", "data.clip_length=8", "data.test_clips=1", "train.N=10",
                                      "train.batch_size=8", "train.max_steps=200", "train.lr=0.0005",
                                      "train.lr_drop_at=1.0"});
    const auto ds = train_split(cfg);
    const auto r = train_teacher(ds, cfg, {});
    EXPECT_GE(r.metrics["train"]["f1"].get<double>(), 0.9);
}
