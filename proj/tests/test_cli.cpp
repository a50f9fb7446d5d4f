#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kTiny =
    " --set data.num_clips=2 --set data.clip_length=4 --set data.height=64 --set data.width=64"
    " --set data.test_clips=1 --set model.d=32 --set model.heads=4 --set model.msi_heads=4"
    " --set train.N=12 --set train.batch_size=2 --set train.max_steps=3";

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        root_ = fs::temp_directory_path() / ("v2i_cli_" + std::to_string(::getpid()));
        fs::remove_all(root_);
        fs::create_directories(root_);
    }
    void TearDown() override { fs::remove_all(root_); }

    int run(const std::string& args) const {
        const std::string cmd = std::string(V2I_CLI_PATH) + " " + args + " > " + (root_ / "stdout").string() +
                                " 2> " + (root_ / "stderr").string();
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }
    std::string out(const std::string& name) const { return (root_ / name).string(); }

    fs::path root_;
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

}  // namespace

TEST_F(Cli, HelpAndUsageErrors) {
    EXPECT_EQ(run("--help"), 0);
    EXPECT_EQ(run(""), 2);
    EXPECT_EQ(run("no-such-command"), 2);
    EXPECT_EQ(run("gen-data --workers 0"), 2);
    EXPECT_EQ(run("gen-data --config /nonexistent.json"), 2);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
    EXPECT_EQ(run("gen-data --set train.epoch=3 --out " + out("a")), 2);
    EXPECT_EQ(run("gen-data --set train.T=0 --out " + out("a")), 2);
    EXPECT_EQ(run("gen-data --set distill.fd_variant=blurry --out " + out("a")), 2);
    EXPECT_EQ(run("distill" + kTiny + " --out " + out("a")), 2);
    std::ofstream(root_ / "bad.json") << "{\"model\": {\"depth\": 2}}";
    EXPECT_EQ(run("gen-data --config " + out("bad.json") + " --out " + out("a")), 2);
}

TEST_F(Cli, RuntimeFailuresExitOne) {
    std::ofstream(root_ / "garbage.ckpt") << "not a checkpoint";
    EXPECT_EQ(run("eval --ckpt " + out("garbage.ckpt") + kTiny + " --out " + out("e")), 1);
    EXPECT_EQ(run("plot " + out("missing_run") + " --out " + out("p")), 1);
}

TEST_F(Cli, PipelineIsRerunnableWithIdenticalArtifacts) {
    ASSERT_EQ(run("gen-data" + kTiny + " --seed 4 --resume --out " + out("data")), 0);
    EXPECT_TRUE(fs::exists(root_ / "data" / "train" / "annotations.json"));
    EXPECT_TRUE(fs::exists(root_ / "data" / "test" / "annotations.json"));
    for (const char* name : {"t1", "t2"})
        ASSERT_EQ(run("train-teacher" + kTiny + " --seed 4 --resume --data " + out("data") + " --out " + out(name)), 0);
    EXPECT_EQ(slurp(root_ / "t1" / "teacher.ckpt"), slurp(root_ / "t2" / "teacher.ckpt"));
    EXPECT_EQ(slurp(root_ / "t1" / "metrics.json"), slurp(root_ / "t2" / "metrics.json"));

    const std::string teacher = out("t1/teacher.ckpt");
    for (const char* name : {"s1", "s2"})
        ASSERT_EQ(run("distill" + kTiny + " --seed 4 --resume --teacher " + teacher + " --data " + out("data") +
                      " --out " + out(name)),
                  0);
    EXPECT_EQ(slurp(root_ / "s1" / "student.ckpt"), slurp(root_ / "s2" / "student.ckpt"));
    EXPECT_EQ(slurp(root_ / "s1" / "train_log.jsonl"), slurp(root_ / "s2" / "train_log.jsonl"));

    // A teacher with a different width cannot be distilled from.
    EXPECT_EQ(run("distill" + kTiny + " --set model.d=64 --teacher " + teacher + " --data " + out("data") + " --out " +
                  out("s3")),
              2);

    ASSERT_EQ(run("eval --ckpt " + out("s1/student.ckpt") + kTiny + " --data " + out("data") + " --resume --out " +
                  out("ev")),
              0);
    const json report = json::parse(slurp(root_ / "ev" / "report.json"));
    EXPECT_EQ(report["role"], "student");
    EXPECT_EQ(report["input_frames"], 1);
    for (const char* k : {"precision", "recall", "f1", "ap", "ap50", "ap75"}) EXPECT_TRUE(report.contains(k)) << k;
    EXPECT_TRUE(fs::exists(root_ / "ev" / "per_clip.csv"));

    ASSERT_EQ(run("distill" + kTiny + " --set train.max_steps=1 --dump-masks 2 --teacher " + teacher + " --data " +
                  out("data") + " --resume --out " + out("masks")),
              0);
    int pngs = 0;
    for (const auto& e : fs::directory_iterator(root_ / "masks" / "masks")) pngs += e.path().extension() == ".png";
    EXPECT_EQ(pngs, 2);

    ASSERT_EQ(run("plot " + out("t1") + " " + out("s1") + " --out " + out("plots")), 0);
    EXPECT_FALSE(fs::is_empty(root_ / "plots"));
}
