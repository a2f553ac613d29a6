#include "strokekit/phantom.hpp"

#include <algorithm>
#include <cmath>

namespace strokekit {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double law_arg(const PhantomSpec& spec, double age_minutes) {
    return (std::log(age_minutes) - spec.law_mid_log) / spec.law_scale;
}

struct BrainGeom {
    double cx, cy, cz; // voxel center
    double ax, ay, az; // voxel semi-axes

    double r2(double x, double y, double z) const {
        const double u = (x - cx) / ax, v = (y - cy) / ay, w = (z - cz) / az;
        return u * u + v * v + w * w;
    }
};

BrainGeom brain_geom(const PhantomSpec& spec) {
    return {(spec.width - 1) / 2.0,  (spec.height - 1) / 2.0, (spec.slices - 1) / 2.0,
            0.42 * spec.width,       0.42 * spec.height,      0.55 * spec.slices};
}

struct Lesion {
    double cx, cy, cz;    // voxel center
    double rx, ry, rz;    // semi-axes in mm
    double age_minutes = 0;
    std::vector<std::int64_t> voxels; // flat indices of the hard mask
};

// normalized elliptical distance in mm space
double lesion_d2(const PhantomSpec& spec, const Lesion& l, int x, int y, int z) {
    const double u = (x - l.cx) * spec.spacing[0] / l.rx;
    const double v = (y - l.cy) * spec.spacing[1] / l.ry;
    const double w = (z - l.cz) * spec.spacing[2] / l.rz;
    return u * u + v * v + w * w;
}

} // namespace

double lesion_contrast(const PhantomSpec& spec, double age_minutes) {
    return spec.law_base + spec.law_gain * sigmoid(law_arg(spec, age_minutes));
}

double lesion_edge_width(const PhantomSpec& spec, double age_minutes) {
    return spec.edge_base + spec.edge_gain * sigmoid(law_arg(spec, age_minutes));
}

double invert_contrast(const PhantomSpec& spec, double contrast) {
    double z = (contrast - spec.law_base) / spec.law_gain;
    z = std::clamp(z, 1e-9, 1.0 - 1e-9);
    return std::exp(spec.law_mid_log + spec.law_scale * std::log(z / (1.0 - z)));
}

double sample_age(const PhantomSpec& spec, Rng& rng) {
    return std::exp(rng.uniform(std::log(spec.min_age_minutes), std::log(spec.max_age_minutes)));
}

double phantom_background(const PhantomSpec& spec, int x, int y, int z) {
    const auto g = brain_geom(spec);
    const double r2 = g.r2(x, y, z);
    return r2 <= 1.0 ? 1.0 - 0.15 * r2 : 0.0;
}

Phantom generate_phantom(const PhantomSpec& spec, Rng& rng) {
    SK_CHECK(spec.width > 0 && spec.height > 0 && spec.slices > 0, ConfigError,
             "generate_phantom: bad extents");
    SK_CHECK(spec.min_lesions >= 0 && spec.max_lesions >= spec.min_lesions, ConfigError,
             "generate_phantom: bad lesion range");
    SK_CHECK(spec.min_age_minutes > 0 && spec.max_age_minutes >= spec.min_age_minutes,
             ConfigError, "generate_phantom: ages must be positive");

    const auto g = brain_geom(spec);
    const size_t plane = static_cast<size_t>(spec.width) * spec.height;

    Phantom out;
    out.volume.width = spec.width;
    out.volume.height = spec.height;
    out.volume.slices = spec.slices;
    out.volume.spacing = spec.spacing;
    out.volume.data.assign(static_cast<size_t>(out.volume.numel()), 0.0f);

    // background tissue, mirror-symmetric in x
    for (int z = 0; z < spec.slices; ++z)
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x)
                out.volume.at(z, y, x) = static_cast<float>(phantom_background(spec, x, y, z));

    const int count = rng.uniform_int(spec.min_lesions, spec.max_lesions);
    const double subject_age = sample_age(spec, rng);
    const bool multi_age = count > 1 && rng.bernoulli(spec.multi_age_prob);

    std::vector<std::uint8_t> occupied(static_cast<size_t>(out.volume.numel()), 0);
    std::vector<Lesion> lesions;
    for (int li = 0; li < count; ++li) {
        Lesion l;
        bool placed = false;
        for (int attempt = 0; attempt < spec.max_place_retries && !placed; ++attempt) {
            l.rx = rng.uniform(spec.min_radius_mm, spec.max_radius_mm);
            l.ry = rng.uniform(spec.min_radius_mm, spec.max_radius_mm);
            l.rz = rng.uniform(spec.min_radius_mm, spec.max_radius_mm);
            const double rvx = l.rx / spec.spacing[0];
            const double rvy = l.ry / spec.spacing[1];
            const double rvz = l.rz / spec.spacing[2];

            // per-axis necessary bound; centers outside it can never pass
            const double mx = 0.9 - rvx / g.ax;
            const double my = 0.9 - rvy / g.ay;
            const double mz = 0.9 - rvz / g.az;
            if (mx <= 0 || my <= 0 || mz <= 0) continue;
            l.cx = g.cx + g.ax * rng.uniform(-mx, mx);
            l.cy = g.cy + g.ay * rng.uniform(-my, my);
            l.cz = g.cz + g.az * rng.uniform(-mz, mz);

            // sufficient condition for the whole ellipsoid to sit inside
            // the brain: inflate the center offset by the semi-axes
            const double u = (std::abs(l.cx - g.cx) + rvx) / g.ax;
            const double v = (std::abs(l.cy - g.cy) + rvy) / g.ay;
            const double w = (std::abs(l.cz - g.cz) + rvz) / g.az;
            if (u * u + v * v + w * w > 0.9 * 0.9) continue;

            const int x0 = std::max(0, static_cast<int>(std::floor(l.cx - rvx)) - 1);
            const int x1 = std::min(spec.width - 1, static_cast<int>(std::ceil(l.cx + rvx)) + 1);
            const int y0 = std::max(0, static_cast<int>(std::floor(l.cy - rvy)) - 1);
            const int y1 = std::min(spec.height - 1, static_cast<int>(std::ceil(l.cy + rvy)) + 1);
            const int z0 = std::max(0, static_cast<int>(std::floor(l.cz - rvz)) - 1);
            const int z1 = std::min(spec.slices - 1, static_cast<int>(std::ceil(l.cz + rvz)) + 1);

            std::vector<std::int64_t> vox;
            bool clash = false;
            for (int z = z0; z <= z1 && !clash; ++z)
                for (int y = y0; y <= y1 && !clash; ++y)
                    for (int x = x0; x <= x1; ++x) {
                        if (lesion_d2(spec, l, x, y, z) > 1.0) continue;
                        const auto idx = static_cast<std::int64_t>(z) * plane +
                                         static_cast<std::int64_t>(y) * spec.width + x;
                        if (occupied[static_cast<size_t>(idx)]) {
                            clash = true;
                            break;
                        }
                        vox.push_back(idx);
                    }
            if (clash || vox.empty()) continue;

            l.voxels = std::move(vox);
            for (auto idx : l.voxels) occupied[static_cast<size_t>(idx)] = 1;
            placed = true;
        }
        SK_CHECK(placed, GenerationError,
                 "generate_phantom: lesion " << li << " found no feasible placement in "
                                             << spec.max_place_retries << " attempts");

        l.age_minutes = multi_age ? sample_age(spec, rng) : subject_age;
        lesions.push_back(std::move(l));
    }

    // darken tissue around each lesion; soft profile, hard ground truth
    for (const auto& l : lesions) {
        const double c = lesion_contrast(spec, l.age_minutes);
        const double w = lesion_edge_width(spec, l.age_minutes);
        const double rvx = l.rx / spec.spacing[0];
        const double rvy = l.ry / spec.spacing[1];
        const double rvz = l.rz / spec.spacing[2];
        const int x0 = std::max(0, static_cast<int>(std::floor(l.cx - 2.5 * rvx)));
        const int x1 = std::min(spec.width - 1, static_cast<int>(std::ceil(l.cx + 2.5 * rvx)));
        const int y0 = std::max(0, static_cast<int>(std::floor(l.cy - 2.5 * rvy)));
        const int y1 = std::min(spec.height - 1, static_cast<int>(std::ceil(l.cy + 2.5 * rvy)));
        const int z0 = std::max(0, static_cast<int>(std::floor(l.cz - 2.5 * rvz)));
        const int z1 = std::min(spec.slices - 1, static_cast<int>(std::ceil(l.cz + 2.5 * rvz)));
        for (int z = z0; z <= z1; ++z)
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const double d = std::sqrt(lesion_d2(spec, l, x, y, z));
                    if (d > 2.5) continue;
                    const double profile = sigmoid((1.0 - d) / w);
                    out.volume.at(z, y, x) *= static_cast<float>(1.0 - c * profile);
                }
    }

    if (spec.noise > 0)
        for (auto& v : out.volume.data) v += static_cast<float>(spec.noise * rng.normal());

    // per-slice instance count must stay within the query budget
    std::vector<int> per_slice(static_cast<size_t>(spec.slices), 0);
    for (const auto& l : lesions) {
        std::vector<char> seen(static_cast<size_t>(spec.slices), 0);
        for (auto idx : l.voxels) seen[static_cast<size_t>(idx / static_cast<std::int64_t>(plane))] = 1;
        for (int z = 0; z < spec.slices; ++z) per_slice[static_cast<size_t>(z)] += seen[static_cast<size_t>(z)];
    }
    for (int z = 0; z < spec.slices; ++z)
        SK_CHECK(per_slice[static_cast<size_t>(z)] <= 10, GenerationError,
                 "generate_phantom: slice " << z << " holds " << per_slice[static_cast<size_t>(z)]
                                            << " instances");

    for (size_t li = 0; li < lesions.size(); ++li) {
        const auto& l = lesions[li];
        InstanceAnnotation ann;
        ann.id = static_cast<int>(li);
        ann.age_minutes = l.age_minutes;
        ann.age_log = std::log(l.age_minutes);
        for (int z = 0; z < spec.slices; ++z) {
            std::vector<std::uint8_t> mask(plane, 0);
            bool any = false;
            for (auto idx : l.voxels) {
                if (idx / static_cast<std::int64_t>(plane) != z) continue;
                mask[static_cast<size_t>(idx % static_cast<std::int64_t>(plane))] = 1;
                any = true;
            }
            if (!any) continue;
            SliceMask sm;
            sm.slice = z;
            sm.runs = rle_encode(mask);
            sm.box = tight_box(mask, spec.height, spec.width);
            ann.slices.push_back(std::move(sm));
        }
        out.annotations.push_back(std::move(ann));
    }
    return out;
}

} // namespace strokekit
