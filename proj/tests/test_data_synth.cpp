#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>

#include "v2i/data_synth.hpp"
#include "v2i/errors.hpp"
#include "v2i/hash.hpp"

using namespace v2i;
using namespace v2i::data;
namespace fs = std::filesystem;

namespace {

GeneratorConfig small(std::uint64_t seed = 0) {
    GeneratorConfig c;
    c.seed = seed;
    c.num_clips = 3;
    c.clip_length = 3;
    c.height = 64;
    c.width = 64;
    return c;
}

GeneratorConfig degraded(std::uint64_t seed = 0) {
    GeneratorConfig c = small(seed);
    c.lesion_max = 3;
    c.occlusion = {0.5, 0.8};
    c.motion_blur = {0.5, 5};
    c.gaussian_blur = {0.5, 2};
    c.brightness_jitter = {0.5, 0.2};
    return c;
}

std::uint64_t checksum(const VideoClip& c) {
    return fnv1a64({reinterpret_cast<const unsigned char*>(c.pixels.data()), c.pixels.size() * sizeof(float)});
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("v2i_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST(DataSynth, OneLesionNoDegradationGivesOneBoxPerFrame) {
    const VideoClip c = generate_clip(small(), 0);
    EXPECT_EQ(c.length(), 3);
    EXPECT_EQ(c.pixels.size(), static_cast<std::size_t>(3 * 64 * 64));
    for (const auto& frame : c.annotations) EXPECT_EQ(frame.size(), 1u);
}

TEST(DataSynth, ClipInvariants) {
    for (std::uint64_t seed : {0, 1, 2}) {
        const GeneratorConfig cfg = degraded(seed);
        for (const VideoClip& c : generate_clips(cfg)) {
            ASSERT_EQ(static_cast<int>(c.annotations.size()), cfg.clip_length);
            for (float v : c.pixels) {
                ASSERT_GE(v, 0.0f);
                ASSERT_LE(v, 1.0f);
            }
            for (const auto& frame : c.annotations) {
                ASSERT_GE(frame.size(), 1u);
                ASSERT_LE(frame.size(), 3u);
                for (const Annotation& a : frame) {
                    EXPECT_GE(a.box.x_min, 0);
                    EXPECT_LT(a.box.x_min, a.box.x_max);
                    EXPECT_LE(a.box.x_max, cfg.width);
                    EXPECT_GE(a.box.y_min, 0);
                    EXPECT_LT(a.box.y_min, a.box.y_max);
                    EXPECT_LE(a.box.y_max, cfg.height);
                }
            }
        }
    }
}

TEST(DataSynth, DeterministicAndSeedSensitive) {
    const VideoClip a = generate_clip(degraded(0), 1), b = generate_clip(degraded(0), 1);
    EXPECT_EQ(a, b);
    const VideoClip c = generate_clip(degraded(1), 1);
    EXPECT_NE(checksum(a), checksum(c));
}

TEST(DataSynth, ClipsAreOrderIndependent) {
    const GeneratorConfig cfg = degraded(5);
    const auto all = generate_clips(cfg);
    for (int k = cfg.num_clips - 1; k >= 0; --k) EXPECT_EQ(generate_clip(cfg, k), all[k]);
}

TEST(DataSynth, InvalidConfigsRaise) {
    GeneratorConfig c = small();
    c.clip_length = 0;
    EXPECT_THROW(generate_clip(c, 0), ConfigError);
    c = small();
    c.height = 16;
    EXPECT_THROW(generate_clip(c, 0), ConfigError);
    c = small();
    c.lesion_min = 3;
    c.lesion_max = 2;
    EXPECT_THROW(generate_clip(c, 0), ConfigError);
    EXPECT_THROW(generate_clip(small(), 3), ConfigError);
}

TEST(DataSynth, BoxesContainTheirBlob) {
    // Rendering the same clip with zero lesion contrast isolates the blob.
    GeneratorConfig cfg = small(11);
    cfg.num_clips = 12;
    cfg.clip_length = 4;
    GeneratorConfig flat = cfg;
    flat.contrast_min = flat.contrast_max = 0.0;
    for (int k = 0; k < cfg.num_clips; ++k) {
        const VideoClip with = generate_clip(cfg, k), without = generate_clip(flat, k);
        for (int t = 0; t < with.length(); ++t) {
            const auto a = with.frame(t), b = without.frame(t);
            double peak = 0;
            for (std::size_t i = 0; i < a.size(); ++i) peak = std::max(peak, std::abs(double(a[i]) - b[i]));
            ASSERT_GT(peak, 0.05);
            const PixelBox& box = with.annotations[t][0].box;
            int inside = 0, total = 0;
            for (int y = 0; y < cfg.height; ++y)
                for (int x = 0; x < cfg.width; ++x) {
                    const std::size_t i = static_cast<std::size_t>(y) * cfg.width + x;
                    if (std::abs(double(a[i]) - b[i]) < 0.5 * peak) continue;
                    ++total;
                    inside += x + 0.5 >= box.x_min && x + 0.5 <= box.x_max && y + 0.5 >= box.y_min &&
                              y + 0.5 <= box.y_max;
                }
            EXPECT_GE(inside, 0.8 * total) << "clip " << k << " frame " << t;
        }
    }
}

TEST(DataSynth, WindowRules) {
    EXPECT_EQ(window_indices(10, 5, 1), (std::vector<int>{5}));
    EXPECT_EQ(window_indices(10, 0, 3), (std::vector<int>{0, 0, 1}));
    EXPECT_EQ(window_indices(10, 5, 3), (std::vector<int>{4, 5, 6}));
    EXPECT_EQ(window_indices(10, 9, 3), (std::vector<int>{8, 9, 9}));
    for (int T = 1; T <= 6; ++T)
        for (int c = 0; c < 10; ++c) EXPECT_EQ(static_cast<int>(window_indices(10, c, T).size()), T);

    const Dataset ds = Dataset::generate(small());
    const VideoClip& clip = ds.clips()[0];
    const VideoClip w = load_window(ds, clip.clip_id, 0, 3);
    EXPECT_EQ(w.length(), 3);
    EXPECT_EQ(w.current_index, 0);
    EXPECT_TRUE(std::equal(w.frame(0).begin(), w.frame(0).end(), clip.frame(0).begin()));
    EXPECT_TRUE(std::equal(w.frame(1).begin(), w.frame(1).end(), clip.frame(0).begin()));
    EXPECT_TRUE(std::equal(w.frame(2).begin(), w.frame(2).end(), clip.frame(1).begin()));
    const VideoClip mid = load_window(ds, clip.clip_id, 1, 3);
    EXPECT_EQ(mid.current_index, 1);
    EXPECT_EQ(mid.annotations[1], clip.annotations[1]);
    const VideoClip single = load_window(ds, clip.clip_id, 2, 1);
    EXPECT_EQ(single.length(), 1);
    EXPECT_EQ(single.current_index, 0);
    EXPECT_THROW(load_window(ds, "no_such_clip", 0, 3), LookupError);
}

TEST(DataSynth, WriteReadRoundTrip) {
    GeneratorConfig cfg = degraded(3);
    cfg.num_clips = 2;
    const auto clips = generate_clips(cfg);
    const fs::path dir = temp_dir("roundtrip");
    const Manifest m = write_dataset(clips, dir, cfg.hash());
    EXPECT_EQ(m.num_clips, 2);
    EXPECT_EQ(m.num_frames, 6);
    EXPECT_EQ(m.config_hash, cfg.hash());

    int pngs = 0, others = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        (e.path().extension() == ".png" ? pngs : others)++;
    }
    EXPECT_EQ(pngs, 6);
    EXPECT_EQ(others, 1);

    const Dataset back = Dataset::load(dir);
    ASSERT_EQ(back.clips().size(), clips.size());
    for (std::size_t i = 0; i < clips.size(); ++i) EXPECT_EQ(back.clips()[i], clips[i]);
    EXPECT_EQ(back.config_hash(), cfg.hash());

    // Naive reader: count 5-number box records in the raw annotation text.
    std::ifstream f(m.annotation_file);
    const std::string text((std::istreambuf_iterator<char>(f)), {});
    const std::regex record(R"(\[\s*-?[0-9.eE+-]+\s*,\s*-?[0-9.eE+-]+\s*,\s*-?[0-9.eE+-]+\s*,\s*-?[0-9.eE+-]+\s*,\s*-?[0-9]+\s*\])");
    const auto count = std::distance(std::sregex_iterator(text.begin(), text.end(), record), std::sregex_iterator());
    std::size_t expected = 0;
    for (const auto& c : clips)
        for (const auto& frame : c.annotations) expected += frame.size();
    EXPECT_EQ(static_cast<std::size_t>(count), expected);
    fs::remove_all(dir);
}

TEST(DataSynth, LoadingMissingDirectoryNamesThePath) {
    try {
        Dataset::load("/nonexistent/v2i_dataset");
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/v2i_dataset"), std::string::npos);
    }
}
