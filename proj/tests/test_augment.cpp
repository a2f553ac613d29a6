#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "strokekit/augment.hpp"
#include "strokekit/error.hpp"
#include "strokekit/phantom.hpp"
#include "strokekit/rng.hpp"

using strokekit::AffineParams;
using strokekit::apply_geometric;
using strokekit::AugmentConfig;
using strokekit::bezier_remap;
using strokekit::clip_normalize;
using strokekit::InstanceAnnotation;
using strokekit::percentile_sorted;
using strokekit::random_appearance;
using strokekit::random_geometric;
using strokekit::Rng;
using strokekit::slice_thickness_transform;
using strokekit::SliceMask;
using strokekit::Volume;

namespace {

Volume make_volume(int w, int h, int s, std::array<double, 3> spacing = {1, 1, 1}) {
    Volume v;
    v.width = w;
    v.height = h;
    v.slices = s;
    v.spacing = spacing;
    v.data.assign(static_cast<size_t>(v.numel()), 0.0f);
    return v;
}

Volume random_volume(int w, int h, int s, Rng& rng, std::array<double, 3> spacing = {1, 1, 1}) {
    Volume v = make_volume(w, h, s, spacing);
    for (auto& x : v.data) x = static_cast<float>(rng.uniform(0.0, 1.0));
    return v;
}

InstanceAnnotation instance_from_planes(int id, double age,
                                        const std::vector<std::pair<int, std::vector<std::uint8_t>>>& planes,
                                        int h, int w) {
    InstanceAnnotation ann;
    ann.id = id;
    ann.age_minutes = age;
    ann.age_log = std::log(age);
    for (const auto& [slice, mask] : planes) {
        SliceMask sm;
        sm.slice = slice;
        sm.runs = strokekit::rle_encode(mask);
        sm.box = strokekit::tight_box(mask, h, w);
        ann.slices.push_back(std::move(sm));
    }
    return ann;
}

bool annotations_equal(const std::vector<InstanceAnnotation>& a,
                       const std::vector<InstanceAnnotation>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].id != b[i].id || a[i].age_minutes != b[i].age_minutes) return false;
        if (a[i].slices.size() != b[i].slices.size()) return false;
        for (size_t j = 0; j < a[i].slices.size(); ++j) {
            if (a[i].slices[j].slice != b[i].slices[j].slice) return false;
            if (a[i].slices[j].runs != b[i].slices[j].runs) return false;
            if (a[i].slices[j].box != b[i].slices[j].box) return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("identity draw leaves volume and annotations bit-equal") {
    strokekit::PhantomSpec spec;
    Rng g(Rng::derive(5, "phantom", {0}));
    const auto p = strokekit::generate_phantom(spec, g);

    AugmentConfig cfg;
    cfg.flip_prob = 0;
    cfg.scale_range = 0;
    cfg.translate_mm = 0;
    cfg.rot_axial_rad = 0;
    cfg.rot_other_rad = 0;
    Rng rng(1);
    const auto res = random_geometric(p.volume, p.annotations, cfg, rng);
    CHECK(res.volume.data == p.volume.data);
    CHECK(res.dropped == 0);
    CHECK(annotations_equal(res.annotations, p.annotations));
}

TEST_CASE("flip is the exact mirror and an involution") {
    Rng g(7);
    Volume v = random_volume(9, 5, 3, g);
    std::vector<std::uint8_t> plane(9 * 5, 0);
    plane[1 * 9 + 2] = 1;
    plane[2 * 9 + 2] = 1;
    plane[2 * 9 + 3] = 1;
    const auto anns = std::vector<InstanceAnnotation>{
        instance_from_planes(0, 120, {{1, plane}}, 5, 9)};

    AffineParams flip;
    flip.flip = true;
    const auto once = apply_geometric(v, anns, flip);
    for (int z = 0; z < v.slices; ++z)
        for (int y = 0; y < v.height; ++y)
            for (int x = 0; x < v.width; ++x)
                CHECK(once.volume.at(z, y, x) == v.at(z, y, 8 - x));
    // mask mirrored: column 2..3 becomes 5..6
    const auto dec = strokekit::rle_decode(once.annotations[0].slices[0].runs, 9 * 5);
    CHECK(dec[1 * 9 + 6] == 1);
    CHECK(dec[2 * 9 + 6] == 1);
    CHECK(dec[2 * 9 + 5] == 1);
    CHECK(std::accumulate(dec.begin(), dec.end(), 0) == 3);

    const auto twice = apply_geometric(once.volume, once.annotations, flip);
    CHECK(twice.volume.data == v.data);
    CHECK(annotations_equal(twice.annotations, anns));
}

TEST_CASE("quarter-turn axial rotation matches the index permutation") {
    Rng g(11);
    Volume v = random_volume(8, 8, 2, g);
    std::vector<std::uint8_t> plane(8 * 8, 0);
    plane[0 * 8 + 1] = 1; // an L shape off-center
    plane[1 * 8 + 1] = 1;
    plane[1 * 8 + 2] = 1;
    const auto anns = std::vector<InstanceAnnotation>{
        instance_from_planes(0, 60, {{0, plane}}, 8, 8)};

    AffineParams rot;
    rot.rot_axial = std::acos(-1.0) / 2;
    const auto res = apply_geometric(v, anns, rot);

    // forward (x,y) -> (7-y, x), so output (x,y) pulls from input (y, 7-x)
    double worst = 0;
    for (int z = 0; z < v.slices; ++z)
        for (int y = 0; y < v.height; ++y)
            for (int x = 0; x < v.width; ++x)
                worst = std::max(worst,
                                 std::abs(static_cast<double>(res.volume.at(z, y, x)) -
                                          v.at(z, 7 - x, y)));
    CHECK(worst < 1e-6);

    REQUIRE(res.annotations.size() == 1);
    const auto dec = strokekit::rle_decode(res.annotations[0].slices[0].runs, 8 * 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            CHECK(static_cast<int>(dec[static_cast<size_t>(y) * 8 + x]) ==
                  static_cast<int>(plane[static_cast<size_t>(7 - x) * 8 + y]));
}

TEST_CASE("translation converts mm to voxels through the spacing") {
    Rng g(13);
    Volume v = random_volume(8, 6, 4, g, {2, 1, 1});
    AffineParams tr;
    tr.translate_mm = {4, -2, 1}; // voxel shift (2, -2, 1)
    const auto res = apply_geometric(v, {}, tr);
    for (int z = 0; z < v.slices; ++z)
        for (int y = 0; y < v.height; ++y)
            for (int x = 0; x < v.width; ++x) {
                const int xs = x - 2, ys = y + 2, zs = z - 1;
                const float want = xs >= 0 && xs < 8 && ys >= 0 && ys < 6 && zs >= 0 && zs < 4
                                       ? v.at(zs, ys, xs)
                                       : 0.0f;
                CHECK(res.volume.at(z, y, x) == want);
            }
}

TEST_CASE("instances leaving the frame are dropped and reported") {
    strokekit::PhantomSpec spec;
    Rng g(Rng::derive(5, "phantom", {1}));
    const auto p = strokekit::generate_phantom(spec, g);
    REQUIRE(!p.annotations.empty());

    AffineParams gone;
    gone.translate_mm = {1000, 0, 0};
    const auto res = apply_geometric(p.volume, p.annotations, gone);
    CHECK(res.annotations.empty());
    CHECK(res.dropped == static_cast<int>(p.annotations.size()));
    CHECK(std::all_of(res.volume.data.begin(), res.volume.data.end(),
                      [](float x) { return x == 0.0f; }));
}

TEST_CASE("random geometric draws are deterministic and keep the contract") {
    strokekit::PhantomSpec spec;
    Rng g(Rng::derive(5, "phantom", {2}));
    const auto p = strokekit::generate_phantom(spec, g);

    const AugmentConfig cfg;
    Rng r1(Rng::derive(9, "augment", {4}));
    Rng r2(Rng::derive(9, "augment", {4}));
    const auto a = random_geometric(p.volume, p.annotations, cfg, r1);
    const auto b = random_geometric(p.volume, p.annotations, cfg, r2);
    CHECK(a.volume.data == b.volume.data);
    CHECK(annotations_equal(a.annotations, b.annotations));
    CHECK(a.dropped == b.dropped);

    CHECK(a.volume.width == p.volume.width);
    CHECK(a.volume.height == p.volume.height);
    CHECK(a.volume.slices == p.volume.slices);
    CHECK(a.dropped + static_cast<int>(a.annotations.size()) ==
          static_cast<int>(p.annotations.size()));
    for (const auto& ann : a.annotations) {
        REQUIRE(!ann.slices.empty());
        for (const auto& sm : ann.slices) {
            const auto dec = strokekit::rle_decode(sm.runs, 64 * 64);
            CHECK(std::count(dec.begin(), dec.end(), 1) > 0);
            CHECK(sm.box == strokekit::tight_box(dec, 64, 64)); // boxes recomputed
        }
    }
}

TEST_CASE("slice thickness transform keeps extents and global mean") {
    strokekit::PhantomSpec spec;
    Rng g(Rng::derive(5, "phantom", {3}));
    const auto p = strokekit::generate_phantom(spec, g);

    // at or below native spacing: untouched
    CHECK(slice_thickness_transform(p.volume, 1.0).data == p.volume.data);
    CHECK(slice_thickness_transform(p.volume, 0.5).data == p.volume.data);

    const auto thick = slice_thickness_transform(p.volume, 3.0);
    CHECK(thick.width == p.volume.width);
    CHECK(thick.height == p.volume.height);
    CHECK(thick.slices == p.volume.slices);

    const auto mean = [](const Volume& v) {
        double m = 0;
        for (const auto x : v.data) m += x;
        return m / static_cast<double>(v.data.size());
    };
    CHECK(mean(thick) == doctest::Approx(mean(p.volume)).epsilon(1e-5));

    // averaging across slices must damp variation along z
    const auto tv_z = [](const Volume& v) {
        double tv = 0;
        for (int z = 0; z + 1 < v.slices; ++z)
            for (int y = 0; y < v.height; ++y)
                for (int x = 0; x < v.width; ++x)
                    tv += std::abs(static_cast<double>(v.at(z + 1, y, x)) - v.at(z, y, x));
        return tv;
    };
    CHECK(tv_z(thick) < 0.7 * tv_z(p.volume));
}

TEST_CASE("bezier remap honors its anchors") {
    Volume ramp = make_volume(64, 8, 8);
    for (size_t i = 0; i < ramp.data.size(); ++i)
        ramp.data[i] = static_cast<float>(i) / static_cast<float>(ramp.data.size() - 1);

    // diagonal control points: identity
    const auto same = bezier_remap(ramp, {1.0 / 3, 1.0 / 3}, {2.0 / 3, 2.0 / 3});
    for (size_t i = 0; i < ramp.data.size(); ++i)
        CHECK(std::abs(same.data[i] - ramp.data[i]) < 1e-6);

    // output stays inside the input range for any control points
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const std::array<double, 2> p1{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
        const std::array<double, 2> p2{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
        const auto out = bezier_remap(ramp, p1, p2);
        for (const auto v : out.data) {
            CHECK(v >= -1e-6f);
            CHECK(v <= 1.0f + 1e-6f);
        }
    }

    // a curved remap is not idempotent
    const auto once = bezier_remap(ramp, {0.1, 0.9}, {0.3, 0.95});
    const auto twice = bezier_remap(once, {0.1, 0.9}, {0.3, 0.95});
    double diff = 0;
    for (size_t i = 0; i < ramp.data.size(); ++i)
        diff = std::max(diff, std::abs(static_cast<double>(twice.data[i]) - once.data[i]));
    CHECK(diff > 1e-3);

    // x-ordered control points give a monotone remap
    const auto mono = bezier_remap(ramp, {0.3, 0.15}, {0.7, 0.9});
    for (size_t i = 0; i + 1 < mono.data.size(); ++i)
        CHECK(mono.data[i + 1] >= mono.data[i] - 1e-6f);

    // constant volumes pass through
    Volume flat = make_volume(4, 4, 1);
    std::fill(flat.data.begin(), flat.data.end(), 0.25f);
    CHECK(bezier_remap(flat, {0.1, 0.9}, {0.2, 0.8}).data == flat.data);
}

TEST_CASE("random appearance is seed-deterministic") {
    strokekit::PhantomSpec spec;
    Rng g(Rng::derive(5, "phantom", {4}));
    const auto p = strokekit::generate_phantom(spec, g);

    const AugmentConfig cfg;
    Rng r1(Rng::derive(17, "augment", {0}));
    Rng r2(Rng::derive(17, "augment", {0}));
    Rng r3(Rng::derive(17, "augment", {1}));
    const auto a = random_appearance(p.volume, cfg, r1);
    const auto b = random_appearance(p.volume, cfg, r2);
    const auto c = random_appearance(p.volume, cfg, r3);
    CHECK(a.data == b.data);
    CHECK(a.data != c.data);
}

TEST_CASE("percentiles interpolate linearly on the sorted sample") {
    std::vector<float> v(10);
    std::iota(v.begin(), v.end(), 0.0f);
    CHECK(percentile_sorted(v, 0) == doctest::Approx(0.0));
    CHECK(percentile_sorted(v, 100) == doctest::Approx(9.0));
    CHECK(percentile_sorted(v, 50) == doctest::Approx(4.5));
    CHECK(percentile_sorted(v, 25) == doctest::Approx(2.25));
    CHECK(percentile_sorted(v, 0.5) == doctest::Approx(0.045));
    CHECK_THROWS_AS(percentile_sorted(v, 101), strokekit::ConfigError);
    CHECK_THROWS_AS(percentile_sorted({}, 50), strokekit::InputError);
}

TEST_CASE("clip normalize yields zero mean unit variance and clips outliers") {
    strokekit::PhantomSpec spec;
    Rng g(Rng::derive(5, "phantom", {5}));
    const auto p = strokekit::generate_phantom(spec, g);
    const auto z = clip_normalize(p.volume);
    double mean = 0;
    for (const auto x : z.data) mean += x;
    mean /= static_cast<double>(z.data.size());
    double var = 0;
    for (const auto x : z.data) var += (x - mean) * (x - mean);
    var /= static_cast<double>(z.data.size());
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(std::sqrt(var) - 1) < 1e-3);

    Volume flat = make_volume(4, 4, 2);
    std::fill(flat.data.begin(), flat.data.end(), 3.0f);
    const auto fz = clip_normalize(flat);
    CHECK(std::all_of(fz.data.begin(), fz.data.end(), [](float x) { return x == 0.0f; }));

    // a wild outlier is clipped to the interpolated 99.5th percentile before
    // the moments; oracle recomputes from first principles
    Volume out = make_volume(10, 10, 10);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = static_cast<float>(i);
    out.data[999] = 1e6f;
    std::vector<float> sorted = out.data;
    std::sort(sorted.begin(), sorted.end());
    const double lo = 0.005 * 999;          // rank of the 0.5th percentile
    const double hi_rank = 0.995 * 999;     // 994.005 -> between 994 and 995
    const double hi =
        sorted[994] + (hi_rank - 994) * (static_cast<double>(sorted[995]) - sorted[994]);
    std::vector<double> clipped;
    for (const auto x : out.data) clipped.push_back(std::clamp(static_cast<double>(x), lo, hi));
    double m = 0;
    for (const auto x : clipped) m += x;
    m /= static_cast<double>(clipped.size());
    double s2 = 0;
    for (const auto x : clipped) s2 += (x - m) * (x - m);
    const double sd = std::sqrt(s2 / static_cast<double>(clipped.size()));
    const auto oz = clip_normalize(out);
    for (size_t i = 0; i < oz.data.size(); ++i)
        CHECK(oz.data[i] == doctest::Approx((clipped[i] - m) / sd).epsilon(1e-6));
}
