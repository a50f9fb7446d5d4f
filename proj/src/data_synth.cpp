#include "v2i/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "v2i/errors.hpp"
#include "v2i/hash.hpp"
#include "v2i/png_io.hpp"

namespace v2i::data {

namespace fs = std::filesystem;
using nlohmann::json;

NLOHMANN_JSON_SERIALIZE_ENUM(MotionModel, {{MotionModel::random_walk, "random_walk"},
                                           {MotionModel::linear_drift, "linear_drift"}})

void to_json(json& j, const Degradation& d) {
    j = json{{"probability", d.probability}, {"magnitude", d.magnitude}};
}

void from_json(const json& j, Degradation& d) {
    d.probability = j.value("probability", d.probability);
    d.magnitude = j.value("magnitude", d.magnitude);
}

namespace {

// Hash-based value noise over an unbounded lattice, so the camera can pan
// without running off a precomputed texture.
class ValueNoise {
public:
    explicit ValueNoise(std::uint64_t seed) : seed_(seed) {}

    double operator()(double x, double y) const {
        static constexpr double kCell[] = {32.0, 16.0, 8.0, 4.0};
        static constexpr double kAmp[] = {0.45, 0.28, 0.17, 0.10};
        double v = 0.0;
        for (int o = 0; o < 4; ++o) v += kAmp[o] * octave(x / kCell[o], y / kCell[o], o);
        return v;
    }

private:
    double lattice(std::int64_t ix, std::int64_t iy, int octave) const {
        std::uint64_t h = splitmix64(seed_ ^ static_cast<std::uint64_t>(octave) * 0x9E37ULL);
        h = splitmix64(h ^ static_cast<std::uint64_t>(ix) * 0x8da6b343ULL);
        h = splitmix64(h ^ static_cast<std::uint64_t>(iy) * 0xd8163841ULL);
        return static_cast<double>(h >> 11) * 0x1.0p-53;
    }

    double octave(double x, double y, int o) const {
        const double fx = std::floor(x), fy = std::floor(y);
        const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
        auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
        const double tx = smooth(x - fx), ty = smooth(y - fy);
        const double a = lattice(ix, iy, o), b = lattice(ix + 1, iy, o);
        const double c = lattice(ix, iy + 1, o), d = lattice(ix + 1, iy + 1, o);
        return (a + (b - a) * tx) * (1 - ty) + (c + (d - c) * tx) * ty;
    }

    std::uint64_t seed_;
};

struct Lesion {
    double cx, cy, vx, vy, sx, sy, amplitude;
    int class_id;
};

using Plane = std::vector<double>;  // [H, W]

double sample_clamped(const Plane& p, int h, int w, double x, double y) {
    x = std::clamp(x, 0.0, w - 1.0);
    y = std::clamp(y, 0.0, h - 1.0);
    const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double tx = x - x0, ty = y - y0;
    const double a = p[y0 * w + x0], b = p[y0 * w + x1];
    const double c = p[y1 * w + x0], d = p[y1 * w + x1];
    return (a + (b - a) * tx) * (1 - ty) + (c + (d - c) * tx) * ty;
}

void gaussian_blur(Plane& p, int h, int w, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k) v /= sum;
    Plane tmp(p.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[i + radius] * p[y * w + std::clamp(x + i, 0, w - 1)];
            tmp[y * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[i + radius] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
            p[y * w + x] = acc;
        }
}

void motion_blur(Plane& p, int h, int w, double length, double angle) {
    const int taps = std::max(2, static_cast<int>(std::ceil(length)) + 1);
    const double dx = std::cos(angle), dy = std::sin(angle);
    Plane out(p.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = 0; i < taps; ++i) {
                const double s = length * (static_cast<double>(i) / (taps - 1) - 0.5);
                acc += sample_clamped(p, h, w, x + s * dx, y + s * dy);
            }
            out[y * w + x] = acc / taps;
        }
    p = std::move(out);
}

void reflect(double& c, double& v, double lo, double hi) {
    if (hi <= lo) {
        c = 0.5 * (lo + hi);
        v = 0;
        return;
    }
    for (int guard = 0; guard < 4 && (c < lo || c > hi); ++guard) {
        if (c < lo) c = 2 * lo - c, v = std::abs(v);
        if (c > hi) c = 2 * hi - c, v = -std::abs(v);
    }
    c = std::clamp(c, lo, hi);
}

}  // namespace

void to_json(json& j, const GeneratorConfig& c) {
    j = json{{"seed", c.seed},
             {"num_clips", c.num_clips},
             {"clip_length", c.clip_length},
             {"height", c.height},
             {"width", c.width},
             {"channels", c.channels},
             {"num_classes", c.num_classes},
             {"lesion_min", c.lesion_min},
             {"lesion_max", c.lesion_max},
             {"lesion_sigma_min", c.lesion_sigma_min},
             {"lesion_sigma_max", c.lesion_sigma_max},
             {"contrast_min", c.contrast_min},
             {"contrast_max", c.contrast_max},
             {"max_speed", c.max_speed},
             {"camera_speed", c.camera_speed},
             {"motion", c.motion},
             {"gaussian_blur", c.gaussian_blur},
             {"motion_blur", c.motion_blur},
             {"occlusion", c.occlusion},
             {"brightness_jitter", c.brightness_jitter}};
}

void from_json(const json& j, GeneratorConfig& c) {
    GeneratorConfig d;
    c.seed = j.value("seed", d.seed);
    c.num_clips = j.value("num_clips", d.num_clips);
    c.clip_length = j.value("clip_length", d.clip_length);
    c.height = j.value("height", d.height);
    c.width = j.value("width", d.width);
    c.channels = j.value("channels", d.channels);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.lesion_min = j.value("lesion_min", d.lesion_min);
    c.lesion_max = j.value("lesion_max", d.lesion_max);
    c.lesion_sigma_min = j.value("lesion_sigma_min", d.lesion_sigma_min);
    c.lesion_sigma_max = j.value("lesion_sigma_max", d.lesion_sigma_max);
    c.contrast_min = j.value("contrast_min", d.contrast_min);
    c.contrast_max = j.value("contrast_max", d.contrast_max);
    c.max_speed = j.value("max_speed", d.max_speed);
    c.camera_speed = j.value("camera_speed", d.camera_speed);
    c.motion = j.value("motion", d.motion);
    if (j.contains("gaussian_blur")) c.gaussian_blur = j.at("gaussian_blur").get<Degradation>();
    if (j.contains("motion_blur")) c.motion_blur = j.at("motion_blur").get<Degradation>();
    if (j.contains("occlusion")) c.occlusion = j.at("occlusion").get<Degradation>();
    if (j.contains("brightness_jitter"))
        c.brightness_jitter = j.at("brightness_jitter").get<Degradation>();
}

void GeneratorConfig::validate() const {
    if (clip_length < 1) throw ConfigError("data: clip length must be >= 1");
    if (height < 32 || width < 32) throw ConfigError("data: height and width must be >= 32");
    if (num_clips < 0) throw ConfigError("data: num_clips must be >= 0");
    if (lesion_min < 1 || lesion_max < lesion_min)
        throw ConfigError("data: lesion count range is empty");
    if (channels != 1 && channels != 3) throw ConfigError("data: channels must be 1 or 3");
    if (num_classes < 1) throw ConfigError("data: num_classes must be >= 1");
    if (lesion_sigma_min <= 0 || lesion_sigma_max < lesion_sigma_min)
        throw ConfigError("data: invalid lesion sigma range");
    if (4 * lesion_sigma_max >= std::min(height, width))
        throw ConfigError("data: lesions do not fit in the frame");
    for (const Degradation* d : {&gaussian_blur, &motion_blur, &occlusion, &brightness_jitter})
        if (d->probability < 0 || d->probability > 1 || d->magnitude < 0)
            throw ConfigError("data: degradation probability must be in [0,1], magnitude >= 0");
}

std::uint64_t GeneratorConfig::hash() const {
    json j = *this;
    j.erase("num_clips");
    return fnv1a64(j.dump());
}

std::string clip_name(int clip_index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clip_%04d", clip_index);
    return buf;
}

VideoClip generate_clip(const GeneratorConfig& config, int clip_index) {
    config.validate();
    if (clip_index < 0 || clip_index >= config.num_clips)
        throw ConfigError("data: clip_index out of range");

    const std::uint64_t clip_seed = derive_seed(config.seed, static_cast<std::uint64_t>(clip_index));
    std::mt19937_64 rng(clip_seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto range = [&](double lo, double hi) { return lo + (hi - lo) * uni(rng); };

    const int H = config.height, W = config.width, T = config.clip_length;
    const ValueNoise noise(derive_seed(clip_seed, 1));

    std::uniform_int_distribution<int> count_dist(config.lesion_min, config.lesion_max);
    std::uniform_int_distribution<int> class_dist(0, config.num_classes - 1);
    std::vector<Lesion> lesions(count_dist(rng));
    for (Lesion& l : lesions) {
        l.sx = range(config.lesion_sigma_min, config.lesion_sigma_max);
        l.sy = std::clamp(l.sx * range(0.6, 1.6), config.lesion_sigma_min, config.lesion_sigma_max);
        l.cx = range(2 * l.sx, W - 2 * l.sx);
        l.cy = range(2 * l.sy, H - 2 * l.sy);
        const double speed = range(0.3, 1.0) * config.max_speed;
        const double dir = range(0.0, 2 * std::numbers::pi);
        l.vx = speed * std::cos(dir);
        l.vy = speed * std::sin(dir);
        l.amplitude = range(config.contrast_min, config.contrast_max) * (uni(rng) < 0.7 ? 1.0 : -1.0);
        l.class_id = class_dist(rng);
    }
    const double base = range(0.3, 0.5);
    const double texture = range(0.35, 0.6);
    const double cam_dir = range(0.0, 2 * std::numbers::pi);
    double cam_x = range(0, 1000), cam_y = range(0, 1000);
    static constexpr double kTint[3] = {1.0, 0.72, 0.58};

    VideoClip clip;
    clip.clip_id = clip_name(clip_index);
    clip.channels = config.channels;
    clip.height = H;
    clip.width = W;
    clip.pixels.resize(static_cast<std::size_t>(T) * clip.frame_size());
    clip.annotations.resize(T);

    for (int t = 0; t < T; ++t) {
        if (t > 0) {
            for (Lesion& l : lesions) {
                if (config.motion == MotionModel::random_walk) {
                    l.vx += 0.4 * gauss(rng);
                    l.vy += 0.4 * gauss(rng);
                    const double s = std::hypot(l.vx, l.vy);
                    if (s > config.max_speed) l.vx *= config.max_speed / s, l.vy *= config.max_speed / s;
                }
                l.cx += l.vx;
                l.cy += l.vy;
                reflect(l.cx, l.vx, 2 * l.sx, W - 2 * l.sx);
                reflect(l.cy, l.vy, 2 * l.sy, H - 2 * l.sy);
            }
            cam_x += config.camera_speed * std::cos(cam_dir);
            cam_y += config.camera_speed * std::sin(cam_dir);
        }

        Plane background(static_cast<std::size_t>(H) * W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                background[y * W + x] = base + texture * (noise(x + cam_x, y + cam_y) - 0.5);
        Plane img = background;
        for (const Lesion& l : lesions) {
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const double dx = (x + 0.5 - l.cx) / l.sx, dy = (y + 0.5 - l.cy) / l.sy;
                    img[y * W + x] += l.amplitude * std::exp(-0.5 * (dx * dx + dy * dy));
                }
            clip.annotations[t].push_back(
                {PixelBox{std::max(0.0, l.cx - 2 * l.sx), std::max(0.0, l.cy - 2 * l.sy),
                          std::min<double>(W, l.cx + 2 * l.sx), std::min<double>(H, l.cy + 2 * l.sy)},
                 l.class_id});
        }

        // Degradations are drawn per frame, so neighbouring frames are
        // corrupted independently.
        if (uni(rng) < config.occlusion.probability && !lesions.empty()) {
            const Lesion& l = lesions[std::uniform_int_distribution<std::size_t>(0, lesions.size() - 1)(rng)];
            const double scale = config.occlusion.magnitude * range(0.8, 1.2);
            const double ocx = l.cx + range(-0.5, 0.5) * l.sx, ocy = l.cy + range(-0.5, 0.5) * l.sy;
            const double hw = 2 * l.sx * scale, hh = 2 * l.sy * scale;
            for (int y = std::max(0, static_cast<int>(ocy - hh)); y < std::min(H, static_cast<int>(ocy + hh) + 1); ++y)
                for (int x = std::max(0, static_cast<int>(ocx - hw)); x < std::min(W, static_cast<int>(ocx + hw) + 1); ++x)
                    img[y * W + x] = background[y * W + x];
        }
        if (uni(rng) < config.motion_blur.probability && config.motion_blur.magnitude > 0)
            motion_blur(img, H, W, config.motion_blur.magnitude * range(0.5, 1.0),
                        range(0.0, std::numbers::pi));
        if (uni(rng) < config.gaussian_blur.probability && config.gaussian_blur.magnitude > 0)
            gaussian_blur(img, H, W, config.gaussian_blur.magnitude * range(0.5, 1.0));
        if (uni(rng) < config.brightness_jitter.probability) {
            const double m = config.brightness_jitter.magnitude;
            const double gain = 1.0 + range(-m, m), bias = range(-m, m);
            for (double& v : img) v = v * gain + bias;
        }

        std::span<float> out = clip.frame(t);
        for (int c = 0; c < config.channels; ++c) {
            const double tint = config.channels == 1 ? 1.0 : kTint[c];
            for (int i = 0; i < H * W; ++i) {
                const long q = std::lround(std::clamp(img[i] * tint, 0.0, 1.0) * 255.0);
                out[static_cast<std::size_t>(c) * H * W + i] = static_cast<float>(q) / 255.0f;
            }
        }
    }
    return clip;
}

std::vector<VideoClip> generate_clips(const GeneratorConfig& config) {
    config.validate();
    std::vector<VideoClip> clips;
    clips.reserve(config.num_clips);
    for (int k = 0; k < config.num_clips; ++k) clips.push_back(generate_clip(config, k));
    return clips;
}

Manifest write_dataset(std::span<const VideoClip> clips, const fs::path& dir,
                       std::uint64_t config_hash) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(dir.string(), ec.message());

    Manifest manifest;
    manifest.root = dir;
    manifest.annotation_file = dir / "annotations.json";
    manifest.config_hash = config_hash;

    json jclips = json::array();
    for (const VideoClip& clip : clips) {
        const fs::path clip_dir = dir / clip.clip_id;
        fs::create_directories(clip_dir, ec);
        if (ec) throw IoError(clip_dir.string(), ec.message());
        json frames = json::array(), boxes = json::array();
        const int plane = clip.height * clip.width;
        for (int t = 0; t < clip.length(); ++t) {
            Image8 img{clip.width, clip.height, clip.channels, {}};
            img.data.resize(clip.frame_size());
            std::span<const float> f = clip.frame(t);
            for (int c = 0; c < clip.channels; ++c)
                for (int i = 0; i < plane; ++i)
                    img.data[static_cast<std::size_t>(i) * clip.channels + c] = static_cast<std::uint8_t>(
                        std::lround(std::clamp(f[static_cast<std::size_t>(c) * plane + i], 0.0f, 1.0f) * 255.0f));
            const std::string rel = clip.clip_id + "/frame_" + std::to_string(t) + ".png";
            write_png(dir / rel, img);
            frames.push_back(rel);
            json fb = json::array();
            for (const Annotation& a : clip.annotations[t])
                fb.push_back({a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max, a.class_id});
            boxes.push_back(std::move(fb));
            ++manifest.num_frames;
        }
        jclips.push_back({{"id", clip.clip_id}, {"frames", frames}, {"boxes", boxes}});
        ++manifest.num_clips;
    }

    json doc{{"clips", jclips}, {"config_hash", config_hash}};
    std::ofstream out(manifest.annotation_file);
    if (!out) throw IoError(manifest.annotation_file.string(), "cannot open for writing");
    out << doc.dump(1) << '\n';
    if (!out) throw IoError(manifest.annotation_file.string(), "write failed");
    return manifest;
}

Dataset::Dataset(std::vector<VideoClip> clips, std::uint64_t config_hash)
    : clips_(std::move(clips)), config_hash_(config_hash) {}

Dataset Dataset::generate(const GeneratorConfig& config) {
    return Dataset(generate_clips(config), config.hash());
}

Dataset Dataset::load(const fs::path& dir) {
    const fs::path ann = dir / "annotations.json";
    std::ifstream in(ann);
    if (!in) throw IoError(ann.string(), "cannot open annotation file");
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw IoError(ann.string(), e.what());
    }
    std::vector<VideoClip> clips;
    for (const json& jc : doc.at("clips")) {
        VideoClip clip;
        clip.clip_id = jc.at("id").get<std::string>();
        const json& frames = jc.at("frames");
        const json& boxes = jc.at("boxes");
        if (frames.size() != boxes.size())
            throw IoError(ann.string(), "clip " + clip.clip_id + ": frame/box count mismatch");
        for (std::size_t t = 0; t < frames.size(); ++t) {
            const Image8 img = read_png(dir / frames[t].get<std::string>());
            if (t == 0) {
                clip.channels = img.channels;
                clip.height = img.height;
                clip.width = img.width;
                clip.pixels.reserve(frames.size() * clip.frame_size());
            } else if (img.channels != clip.channels || img.height != clip.height || img.width != clip.width) {
                throw IoError((dir / frames[t].get<std::string>()).string(), "frame size differs within clip");
            }
            const int plane = img.height * img.width;
            for (int c = 0; c < img.channels; ++c)
                for (int i = 0; i < plane; ++i)
                    clip.pixels.push_back(static_cast<float>(img.data[static_cast<std::size_t>(i) * img.channels + c]) / 255.0f);
            std::vector<Annotation> anns;
            for (const json& b : boxes[t])
                anns.push_back({PixelBox{b.at(0).get<double>(), b.at(1).get<double>(),
                                         b.at(2).get<double>(), b.at(3).get<double>()},
                                b.at(4).get<int>()});
            clip.annotations.push_back(std::move(anns));
        }
        clips.push_back(std::move(clip));
    }
    return Dataset(std::move(clips), doc.value("config_hash", std::uint64_t{0}));
}

const VideoClip& Dataset::clip(const std::string& clip_id) const {
    for (const VideoClip& c : clips_)
        if (c.clip_id == clip_id) return c;
    throw LookupError("unknown clip id: " + clip_id);
}

int Dataset::num_frames() const {
    int n = 0;
    for (const VideoClip& c : clips_) n += c.length();
    return n;
}

std::vector<int> window_indices(int clip_length, int center_frame, int T) {
    if (T < 1) throw ConfigError("window length T must be >= 1");
    if (center_frame < 0 || center_frame >= clip_length)
        throw LookupError("center frame " + std::to_string(center_frame) + " outside clip");
    const int past = T / 2;
    std::vector<int> idx(T);
    for (int i = 0; i < T; ++i) idx[i] = std::clamp(center_frame - past + i, 0, clip_length - 1);
    return idx;
}

VideoClip load_window(const VideoClip& clip, int center_frame, int T) {
    const std::vector<int> idx = window_indices(clip.length(), center_frame, T);
    VideoClip win;
    win.clip_id = clip.clip_id;
    win.channels = clip.channels;
    win.height = clip.height;
    win.width = clip.width;
    win.pixels.reserve(T * clip.frame_size());
    for (int k : idx) {
        std::span<const float> f = clip.frame(k);
        win.pixels.insert(win.pixels.end(), f.begin(), f.end());
        win.annotations.push_back(clip.annotations[k]);
    }
    win.current_index = static_cast<int>(std::find(idx.begin(), idx.end(), center_frame) - idx.begin());
    return win;
}

VideoClip load_window(const Dataset& dataset, const std::string& clip_id, int center_frame, int T) {
    return load_window(dataset.clip(clip_id), center_frame, T);
}

}  // namespace v2i::data
