#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "strokekit/error.hpp"

namespace strokekit {

// One output sample expressed as a weighted sum of input samples.
struct ResampleTap {
    int src;
    double w;
};

using ResamplePlan = std::vector<std::vector<ResampleTap>>; // [dst] -> taps

// Exact area (box) resampling: output cell j covers the source interval
// [j*n/m, (j+1)*n/m) of a piecewise-constant signal and takes its average.
// Weights of every output row sum to 1 and column sums are m/n, so the
// global mean is preserved exactly for any n, m.
inline ResamplePlan area_plan(int n, int m) {
    SK_CHECK(n > 0 && m > 0, ShapeError, "area resample needs positive sizes, got "
                                             << n << " -> " << m);
    ResamplePlan plan(static_cast<size_t>(m));
    const double scale = static_cast<double>(n) / m;
    for (int j = 0; j < m; ++j) {
        double lo = j * scale;
        double hi = (j + 1) * scale;
        int first = static_cast<int>(std::floor(lo));
        int last = std::min(n - 1, static_cast<int>(std::ceil(hi)) - 1);
        auto& taps = plan[static_cast<size_t>(j)];
        for (int i = first; i <= last; ++i) {
            double cover = std::min<double>(hi, i + 1) - std::max<double>(lo, i);
            if (cover > 0) taps.push_back({i, cover / scale});
        }
    }
    return plan;
}

// Bilinear (align_corners=false) taps: output center j+0.5 maps to source
// coordinate (j+0.5)*n/m, interpolated between the two nearest centers with
// edge clamping.
inline ResamplePlan linear_plan(int n, int m) {
    SK_CHECK(n > 0 && m > 0, ShapeError, "linear resample needs positive sizes, got "
                                             << n << " -> " << m);
    ResamplePlan plan(static_cast<size_t>(m));
    const double scale = static_cast<double>(n) / m;
    for (int j = 0; j < m; ++j) {
        double x = (j + 0.5) * scale - 0.5;
        double xf = std::floor(x);
        int i0 = static_cast<int>(xf);
        double f = x - xf;
        int a = std::clamp(i0, 0, n - 1);
        int b = std::clamp(i0 + 1, 0, n - 1);
        auto& taps = plan[static_cast<size_t>(j)];
        if (a == b) {
            taps.push_back({a, 1.0});
        } else {
            if (f < 1.0) taps.push_back({a, 1.0 - f});
            if (f > 0.0) taps.push_back({b, f});
        }
    }
    return plan;
}

// Nearest neighbour with the same center convention as linear_plan.
inline ResamplePlan nearest_plan(int n, int m) {
    SK_CHECK(n > 0 && m > 0, ShapeError, "nearest resample needs positive sizes, got "
                                             << n << " -> " << m);
    ResamplePlan plan(static_cast<size_t>(m));
    const double scale = static_cast<double>(n) / m;
    for (int j = 0; j < m; ++j) {
        int i = static_cast<int>(std::floor((j + 0.5) * scale));
        plan[static_cast<size_t>(j)].push_back({std::clamp(i, 0, n - 1), 1.0});
    }
    return plan;
}

} // namespace strokekit
