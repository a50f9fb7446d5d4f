#pragma once

#include <algorithm>
#include <cmath>

namespace v2i {

// Axis-aligned box in pixel corner form, used at I/O boundaries.
struct PixelBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    bool operator==(const PixelBox&) const = default;
};

// Box in normalized (cx, cy, w, h) form, the internal representation.
struct Box {
    double cx = 0, cy = 0, w = 0, h = 0;

    static Box from_pixels(const PixelBox& p, double image_w, double image_h) {
        return {(p.x_min + p.x_max) * 0.5 / image_w, (p.y_min + p.y_max) * 0.5 / image_h,
                (p.x_max - p.x_min) / image_w, (p.y_max - p.y_min) / image_h};
    }

    PixelBox to_pixels(double image_w, double image_h) const {
        return {(cx - 0.5 * w) * image_w, (cy - 0.5 * h) * image_h, (cx + 0.5 * w) * image_w,
                (cy + 0.5 * h) * image_h};
    }

    PixelBox corners() const { return to_pixels(1.0, 1.0); }
    bool operator==(const Box&) const = default;
};

inline constexpr double kAreaEps = 1e-12;

inline double iou(const PixelBox& a, const PixelBox& b) {
    const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = iw * ih;
    const double uni = std::max(a.area() + b.area() - inter, kAreaEps);
    return inter / uni;
}

// Generalized IoU in [-1, 1]. Zero-area inputs are handled through clamped
// areas so the result stays finite.
inline double giou(const PixelBox& a, const PixelBox& b) {
    const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = iw * ih;
    const double uni = std::max(a.area() + b.area() - inter, kAreaEps);
    const double hull_w = std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min);
    const double hull_h = std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min);
    const double hull = std::max(hull_w * hull_h, kAreaEps);
    return inter / uni - (hull - uni) / hull;
}

inline double iou(const Box& a, const Box& b) { return iou(a.corners(), b.corners()); }
inline double giou(const Box& a, const Box& b) { return giou(a.corners(), b.corners()); }

}  // namespace v2i
