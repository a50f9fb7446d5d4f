#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "v2i/box.hpp"

namespace v2i::data {

enum class MotionModel { random_walk, linear_drift };

struct Degradation {
    double probability = 0.0;
    double magnitude = 0.0;
};

// Controls the synthetic "moving lesion" generator. Identical configs produce
// bit-identical clips; each clip draws from its own RNG stream derived from
// (seed, clip_index), so clips can be generated in any order.
struct GeneratorConfig {
    std::uint64_t seed = 0;
    int num_clips = 1;
    int clip_length = 10;
    int height = 128;
    int width = 128;
    int channels = 1;
    int num_classes = 1;
    int lesion_min = 1;
    int lesion_max = 1;
    double lesion_sigma_min = 5.0;  // pixels
    double lesion_sigma_max = 11.0;
    double contrast_min = 0.18;
    double contrast_max = 0.35;
    double max_speed = 2.5;  // pixels per frame
    double camera_speed = 1.0;
    MotionModel motion = MotionModel::random_walk;
    Degradation gaussian_blur;
    Degradation motion_blur;
    Degradation occlusion;
    Degradation brightness_jitter;

    // Throws ConfigError.
    void validate() const;
    std::uint64_t hash() const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

struct Annotation {
    PixelBox box;
    int class_id = 0;
    bool operator==(const Annotation&) const = default;
};

// T frames of [C, H, W] pixels in [0, 1] plus per-frame annotations.
struct VideoClip {
    std::string clip_id;
    int channels = 1;
    int height = 0;
    int width = 0;
    std::vector<float> pixels;  // [T, C, H, W], row-major
    std::vector<std::vector<Annotation>> annotations;
    int current_index = 0;

    int length() const { return static_cast<int>(annotations.size()); }
    std::size_t frame_size() const {
        return static_cast<std::size_t>(channels) * height * width;
    }
    std::span<const float> frame(int t) const {
        return {pixels.data() + frame_size() * t, frame_size()};
    }
    std::span<float> frame(int t) { return {pixels.data() + frame_size() * t, frame_size()}; }

    bool operator==(const VideoClip&) const = default;
};

VideoClip generate_clip(const GeneratorConfig& config, int clip_index);
std::vector<VideoClip> generate_clips(const GeneratorConfig& config);

std::string clip_name(int clip_index);

struct Manifest {
    std::filesystem::path root;
    std::filesystem::path annotation_file;
    int num_clips = 0;
    int num_frames = 0;
    std::uint64_t config_hash = 0;
};

// Frames go to <dir>/<clip_id>/frame_<k>.png, annotations to
// <dir>/annotations.json. Throws IoError with the offending path.
Manifest write_dataset(std::span<const VideoClip> clips, const std::filesystem::path& dir,
                       std::uint64_t config_hash);

class Dataset {
public:
    Dataset() = default;
    Dataset(std::vector<VideoClip> clips, std::uint64_t config_hash);

    static Dataset generate(const GeneratorConfig& config);
    static Dataset load(const std::filesystem::path& dir);

    const std::vector<VideoClip>& clips() const { return clips_; }
    // Throws LookupError for unknown ids.
    const VideoClip& clip(const std::string& clip_id) const;
    std::uint64_t config_hash() const { return config_hash_; }
    int num_frames() const;

private:
    std::vector<VideoClip> clips_;
    std::uint64_t config_hash_ = 0;
};

// Returns T frames around center_frame: T/2 frames of past context and the
// rest in the future, with clip edges repeated. current_index is the first
// window slot holding center_frame.
VideoClip load_window(const Dataset& dataset, const std::string& clip_id, int center_frame, int T);
VideoClip load_window(const VideoClip& clip, int center_frame, int T);

// Frame indices a window would contain; exposed for tests and batching.
std::vector<int> window_indices(int clip_length, int center_frame, int T);

}  // namespace v2i::data
