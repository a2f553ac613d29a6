#include "strokekit/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "strokekit/error.hpp"

namespace strokekit {

namespace {

struct Mat3 {
    double m[3][3];
};

// R = Rz(az) * Ry(ay) * Rx(ax), acting on (x, y, z) mm offsets
Mat3 rotation(double az, double ay, double ax) {
    const double cz = std::cos(az), sz = std::sin(az);
    const double cy = std::cos(ay), sy = std::sin(ay);
    const double cx = std::cos(ax), sx = std::sin(ax);
    Mat3 r;
    r.m[0][0] = cz * cy;
    r.m[0][1] = cz * sy * sx - sz * cx;
    r.m[0][2] = cz * sy * cx + sz * sx;
    r.m[1][0] = sz * cy;
    r.m[1][1] = sz * sy * sx + cz * cx;
    r.m[1][2] = sz * sy * cx - cz * sx;
    r.m[2][0] = -sy;
    r.m[2][1] = cy * sx;
    r.m[2][2] = cy * cx;
    return r;
}

struct InverseMap {
    double cx, cy, cz;       // voxel center
    double sx, sy, sz;       // spacing
    Mat3 r;                  // forward rotation; transpose inverts it
    double scale;
    bool flip;
    std::array<double, 3> t;

    // input voxel coordinates that land on output voxel (xo, yo, zo)
    void operator()(double xo, double yo, double zo, double& xi, double& yi, double& zi) const {
        const double mx = (xo - cx) * sx - t[0];
        const double my = (yo - cy) * sy - t[1];
        const double mz = (zo - cz) * sz - t[2];
        double px = r.m[0][0] * mx + r.m[1][0] * my + r.m[2][0] * mz;
        double py = r.m[0][1] * mx + r.m[1][1] * my + r.m[2][1] * mz;
        double pz = r.m[0][2] * mx + r.m[1][2] * my + r.m[2][2] * mz;
        px /= scale;
        py /= scale;
        pz /= scale;
        if (flip) px = -px;
        xi = px / sx + cx;
        yi = py / sy + cy;
        zi = pz / sz + cz;
    }
};

float sample_trilinear(const Volume& v, double x, double y, double z) {
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const int z0 = static_cast<int>(std::floor(z));
    const double fx = x - x0, fy = y - y0, fz = z - z0;
    double acc = 0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const int xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
                if (xi < 0 || xi >= v.width || yi < 0 || yi >= v.height || zi < 0 ||
                    zi >= v.slices)
                    continue; // zero padding
                const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                acc += w * v.at(zi, yi, xi);
            }
    return static_cast<float>(acc);
}

std::uint8_t sample_nearest(const std::vector<std::uint8_t>& mask, const Volume& geom, double x,
                            double y, double z) {
    const auto xi = static_cast<long long>(std::llround(x));
    const auto yi = static_cast<long long>(std::llround(y));
    const auto zi = static_cast<long long>(std::llround(z));
    if (xi < 0 || xi >= geom.width || yi < 0 || yi >= geom.height || zi < 0 || zi >= geom.slices)
        return 0;
    return mask[(static_cast<size_t>(zi) * geom.height + static_cast<size_t>(yi)) * geom.width +
                static_cast<size_t>(xi)];
}

std::vector<std::uint8_t> rasterize_instance(const InstanceAnnotation& ann, const Volume& geom) {
    std::vector<std::uint8_t> mask(static_cast<size_t>(geom.numel()), 0);
    const size_t plane = static_cast<size_t>(geom.width) * geom.height;
    for (const auto& sm : ann.slices) {
        SK_CHECK(sm.slice >= 0 && sm.slice < geom.slices, ShapeError,
                 "apply_geometric: slice index outside volume");
        const auto dec = rle_decode(sm.runs, plane);
        for (size_t i = 0; i < plane; ++i)
            if (dec[i]) mask[static_cast<size_t>(sm.slice) * plane + i] = 1;
    }
    return mask;
}

// per-slice annotation rebuilt from a transformed 3D mask; empty -> nullopt
bool extract_instance(const std::vector<std::uint8_t>& mask, const Volume& geom,
                      InstanceAnnotation& out) {
    const size_t plane = static_cast<size_t>(geom.width) * geom.height;
    out.slices.clear();
    for (int z = 0; z < geom.slices; ++z) {
        const std::vector<std::uint8_t> plane_mask(mask.begin() + static_cast<long>(z * plane),
                                                   mask.begin() +
                                                       static_cast<long>((z + 1) * plane));
        if (std::find(plane_mask.begin(), plane_mask.end(), 1) == plane_mask.end()) continue;
        SliceMask sm;
        sm.slice = z;
        sm.runs = rle_encode(plane_mask);
        sm.box = tight_box(plane_mask, geom.height, geom.width);
        out.slices.push_back(std::move(sm));
    }
    return !out.slices.empty();
}

// length-weighted rebinning of the slice axis from n to m slices
std::vector<float> area_rebin_z(const std::vector<float>& data, int width, int height, int n,
                                int m) {
    const size_t plane = static_cast<size_t>(width) * height;
    std::vector<float> out(plane * static_cast<size_t>(m));
    const double ratio = static_cast<double>(n) / m;
    for (int j = 0; j < m; ++j) {
        const double zlo = j * ratio, zhi = (j + 1) * ratio;
        const int i0 = static_cast<int>(std::floor(zlo));
        const int i1 = std::min(n, static_cast<int>(std::ceil(zhi)));
        for (size_t p = 0; p < plane; ++p) {
            double acc = 0;
            for (int i = i0; i < i1; ++i) {
                const double w = std::min(zhi, i + 1.0) - std::max(zlo, static_cast<double>(i));
                if (w > 0) acc += w * data[static_cast<size_t>(i) * plane + p];
            }
            out[static_cast<size_t>(j) * plane + p] = static_cast<float>(acc / ratio);
        }
    }
    return out;
}

} // namespace

GeometricResult apply_geometric(const Volume& vol, const std::vector<InstanceAnnotation>& anns,
                                const AffineParams& params) {
    SK_CHECK(params.scale > 0, ConfigError, "apply_geometric: scale must be positive");
    InverseMap inv{(vol.width - 1) / 2.0,
                   (vol.height - 1) / 2.0,
                   (vol.slices - 1) / 2.0,
                   vol.spacing[0],
                   vol.spacing[1],
                   vol.spacing[2],
                   rotation(params.rot_axial, params.rot_y, params.rot_x),
                   params.scale,
                   params.flip,
                   params.translate_mm};

    GeometricResult res;
    res.volume = vol;
    std::vector<std::vector<std::uint8_t>> in_masks, out_masks;
    for (const auto& a : anns) {
        in_masks.push_back(rasterize_instance(a, vol));
        out_masks.emplace_back(static_cast<size_t>(vol.numel()), 0);
    }

    for (int z = 0; z < vol.slices; ++z)
        for (int y = 0; y < vol.height; ++y)
            for (int x = 0; x < vol.width; ++x) {
                double xi, yi, zi;
                inv(x, y, z, xi, yi, zi);
                res.volume.at(z, y, x) = sample_trilinear(vol, xi, yi, zi);
                if (in_masks.empty()) continue;
                const size_t idx =
                    (static_cast<size_t>(z) * vol.height + static_cast<size_t>(y)) * vol.width +
                    static_cast<size_t>(x);
                for (size_t k = 0; k < in_masks.size(); ++k)
                    out_masks[k][idx] = sample_nearest(in_masks[k], vol, xi, yi, zi);
            }

    for (size_t k = 0; k < anns.size(); ++k) {
        InstanceAnnotation moved = anns[k];
        if (extract_instance(out_masks[k], vol, moved))
            res.annotations.push_back(std::move(moved));
        else
            ++res.dropped;
    }
    return res;
}

AffineParams sample_affine(const AugmentConfig& cfg, Rng& rng) {
    AffineParams p;
    p.flip = rng.bernoulli(cfg.flip_prob);
    p.scale = rng.uniform(1 - cfg.scale_range, 1 + cfg.scale_range);
    p.rot_axial = rng.uniform(-cfg.rot_axial_rad, cfg.rot_axial_rad);
    p.rot_y = rng.uniform(-cfg.rot_other_rad, cfg.rot_other_rad);
    p.rot_x = rng.uniform(-cfg.rot_other_rad, cfg.rot_other_rad);
    for (auto& t : p.translate_mm) t = rng.uniform(-cfg.translate_mm, cfg.translate_mm);
    return p;
}

GeometricResult random_geometric(const Volume& vol, const std::vector<InstanceAnnotation>& anns,
                                 const AugmentConfig& cfg, Rng& rng) {
    return apply_geometric(vol, anns, sample_affine(cfg, rng));
}

Volume slice_thickness_transform(const Volume& vol, double target_thickness_mm) {
    const double native = vol.spacing[2];
    SK_CHECK(native > 0, ConfigError, "slice_thickness_transform: bad native spacing");
    if (!(target_thickness_mm > native)) return vol; // clamped to native
    const double span = native * vol.slices;
    const int m = std::max(1, static_cast<int>(std::llround(span / target_thickness_mm)));
    if (m >= vol.slices) return vol;
    Volume out = vol;
    const auto coarse = area_rebin_z(vol.data, vol.width, vol.height, vol.slices, m);
    out.data = area_rebin_z(coarse, vol.width, vol.height, m, vol.slices);
    return out;
}

Volume bezier_remap(const Volume& vol, const std::array<double, 2>& p1,
                    const std::array<double, 2>& p2) {
    const auto [lo_it, hi_it] = std::minmax_element(vol.data.begin(), vol.data.end());
    SK_CHECK(lo_it != vol.data.end(), InputError, "bezier_remap: empty volume");
    const double lo = *lo_it, hi = *hi_it;
    if (hi - lo < 1e-12) return vol;

    constexpr int N = 1024;
    std::vector<double> xs(N), ys(N);
    for (int k = 0; k < N; ++k) {
        const double t = static_cast<double>(k) / (N - 1);
        const double b1 = 3 * t * (1 - t) * (1 - t);
        const double b2 = 3 * t * t * (1 - t);
        const double b3 = t * t * t;
        xs[k] = b1 * p1[0] + b2 * p2[0] + b3;
        ys[k] = b1 * p1[1] + b2 * p2[1] + b3;
    }
    std::vector<int> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return xs[a] < xs[b]; });
    std::vector<double> sx(N), sy(N);
    for (int k = 0; k < N; ++k) {
        sx[k] = xs[order[static_cast<size_t>(k)]];
        sy[k] = ys[order[static_cast<size_t>(k)]];
    }

    Volume out = vol;
    for (auto& v : out.data) {
        const double u = (v - lo) / (hi - lo);
        const auto it = std::upper_bound(sx.begin(), sx.end(), u);
        const int hi_idx = std::clamp(static_cast<int>(it - sx.begin()), 1, N - 1);
        const double x0 = sx[hi_idx - 1], x1 = sx[hi_idx];
        const double y0 = sy[hi_idx - 1], y1 = sy[hi_idx];
        const double f = x1 - x0 < 1e-15 ? 0.0 : (u - x0) / (x1 - x0);
        v = static_cast<float>((y0 + f * (y1 - y0)) * (hi - lo) + lo);
    }
    return out;
}

Volume random_appearance(const Volume& vol, const AugmentConfig& cfg, Rng& rng) {
    const double thickness = rng.uniform(cfg.min_thickness_mm, cfg.max_thickness_mm);
    std::array<double, 4> e{};
    for (auto& v : e) v = rng.uniform(-cfg.bezier_jitter, cfg.bezier_jitter);
    const auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
    const std::array<double, 2> p1{clamp01(1.0 / 3 + e[0]), clamp01(1.0 / 3 + e[1])};
    const std::array<double, 2> p2{clamp01(2.0 / 3 + e[2]), clamp01(2.0 / 3 + e[3])};
    return bezier_remap(slice_thickness_transform(vol, thickness), p1, p2);
}

double percentile_sorted(const std::vector<float>& sorted, double q) {
    SK_CHECK(!sorted.empty(), InputError, "percentile_sorted: empty sample");
    SK_CHECK(q >= 0 && q <= 100, ConfigError, "percentile_sorted: q outside [0, 100]");
    const double r = q / 100.0 * (static_cast<double>(sorted.size()) - 1);
    const auto lo = static_cast<size_t>(std::floor(r));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double f = r - static_cast<double>(lo);
    return sorted[lo] + f * (static_cast<double>(sorted[hi]) - sorted[lo]);
}

Volume clip_normalize(const Volume& vol) {
    SK_CHECK(!vol.data.empty(), InputError, "clip_normalize: empty volume");
    std::vector<float> sorted = vol.data;
    std::sort(sorted.begin(), sorted.end());
    const double lo = percentile_sorted(sorted, 0.5);
    const double hi = percentile_sorted(sorted, 99.5);

    Volume out = vol;
    double mean = 0;
    for (auto& v : out.data) {
        v = static_cast<float>(std::clamp(static_cast<double>(v), lo, hi));
        mean += v;
    }
    mean /= static_cast<double>(out.data.size());
    double var = 0;
    for (const auto v : out.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(out.data.size());
    const double sd = std::sqrt(var);
    for (auto& v : out.data)
        v = sd < 1e-12 ? 0.0f : static_cast<float>((v - mean) / sd);
    return out;
}

} // namespace strokekit
