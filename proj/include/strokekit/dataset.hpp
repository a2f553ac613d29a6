#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "strokekit/error.hpp"

namespace strokekit {

// Volumetric image, slice-major [slice][row][col], spacing in mm.
struct Volume {
    int width = 0, height = 0, slices = 0;
    std::array<double, 3> spacing{1, 1, 1};
    std::vector<float> data;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(width) * height * slices;
    }
    float& at(int s, int y, int x) {
        return data[(static_cast<size_t>(s) * height + y) * width + x];
    }
    float at(int s, int y, int x) const {
        return data[(static_cast<size_t>(s) * height + y) * width + x];
    }
};

// One instance's footprint on one slice: run-length encoding over the
// row-major flattened plane plus the tight normalized (cx, cy, w, h) box.
struct SliceMask {
    int slice = 0;
    std::vector<std::pair<int, int>> runs; // (start offset, length)
    std::array<double, 4> box{};
};

struct InstanceAnnotation {
    int id = 0;
    double age_minutes = 0;
    double age_log = 0; // always ln(age_minutes)
    std::vector<SliceMask> slices;
};

struct DatasetRecord {
    int subject = 0;
    std::string volume_file, ann_file;
    std::string split = "none"; // "test", "fold<k>", or "none"
    std::vector<InstanceAnnotation> annotations;
    Volume volume;
};

inline std::vector<std::pair<int, int>> rle_encode(const std::vector<std::uint8_t>& mask) {
    std::vector<std::pair<int, int>> runs;
    size_t i = 0;
    while (i < mask.size()) {
        if (!mask[i]) {
            ++i;
            continue;
        }
        const size_t start = i;
        while (i < mask.size() && mask[i]) ++i;
        runs.emplace_back(static_cast<int>(start), static_cast<int>(i - start));
    }
    return runs;
}

inline std::vector<std::uint8_t> rle_decode(const std::vector<std::pair<int, int>>& runs,
                                            int numel) {
    std::vector<std::uint8_t> mask(static_cast<size_t>(numel), 0);
    for (const auto& [start, len] : runs) {
        SK_CHECK(start >= 0 && len > 0 && start + len <= numel, InputError,
                 "rle run (" << start << ", " << len << ") exceeds plane of " << numel);
        for (int i = 0; i < len; ++i) mask[static_cast<size_t>(start + i)] = 1;
    }
    return mask;
}

// Tight normalized (cx, cy, w, h) box of a nonempty h x w mask.
inline std::array<double, 4> tight_box(const std::vector<std::uint8_t>& mask, int h, int w) {
    int x0 = w, x1 = -1, y0 = h, y1 = -1;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask[static_cast<size_t>(y * w + x)]) {
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
            }
    SK_CHECK(x1 >= 0, InputError, "tight_box: empty mask");
    return {(x0 + x1 + 1) / 2.0 / w, (y0 + y1 + 1) / 2.0 / h, (x1 - x0 + 1) / static_cast<double>(w),
            (y1 - y0 + 1) / static_cast<double>(h)};
}

} // namespace strokekit
