#pragma once

#include <algorithm>
#include <cmath>

namespace strokekit {

// Axis-aligned box in corner form. Helpers take the ubiquitous normalized
// (cx, cy, w, h) encoding.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    static Box from_cxcywh(double cx, double cy, double w, double h) {
        return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    }

    double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }

    bool contains(double x, double y) const {
        return x >= x1 && x <= x2 && y >= y1 && y <= y2;
    }
};

inline double box_intersection(const Box& a, const Box& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    return std::max(0.0, iw) * std::max(0.0, ih);
}

inline double box_iou(const Box& a, const Box& b) {
    const double inter = box_intersection(a, b);
    const double uni = a.area() + b.area() - inter;
    return inter / (uni + 1e-7);
}

// IoU - (|C| - |U|)/|C| with C the tightest enclosing box; in [-1, 1].
inline double box_giou(const Box& a, const Box& b) {
    const double inter = box_intersection(a, b);
    const double uni = a.area() + b.area() - inter;
    const Box c{std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2),
                std::max(a.y2, b.y2)};
    const double ca = c.area();
    return inter / (uni + 1e-7) - (ca - uni) / (ca + 1e-7);
}

} // namespace strokekit
