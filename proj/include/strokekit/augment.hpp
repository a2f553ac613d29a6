#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "strokekit/dataset.hpp"
#include "strokekit/rng.hpp"

namespace strokekit {

struct AugmentConfig {
    double flip_prob = 0.5;
    double scale_range = 0.05;   // isotropic factor drawn from 1 +- range
    double translate_mm = 20.0;  // per-axis draw from +- range
    double rot_axial_rad = 0.5;  // about the slice normal
    double rot_other_rad = 0.1;  // about each in-plane axis
    double min_thickness_mm = 1.0;
    double max_thickness_mm = 3.0;
    double bezier_jitter = 0.15; // intensity-curve control-point offset range
    std::uint64_t seed = 0;      // base for per-sample stream derivation
};

struct AffineParams {
    bool flip = false; // mirror across the volume's mid-x plane
    double scale = 1.0;
    double rot_axial = 0, rot_y = 0, rot_x = 0; // radians
    std::array<double, 3> translate_mm{0, 0, 0};
};

struct GeometricResult {
    Volume volume;
    std::vector<InstanceAnnotation> annotations;
    int dropped = 0; // instances whose mask left the frame entirely
};

// Forward map applies flip, isotropic scale, Rz*Ry*Rx rotation, then
// translation, all about the volume center in mm space. Output voxels are
// filled by the inverse map: trilinear with zero padding for intensities,
// nearest for masks, so masks stay binary. Boxes are recomputed from the
// transformed masks.
GeometricResult apply_geometric(const Volume& vol, const std::vector<InstanceAnnotation>& anns,
                                const AffineParams& params);

// draw order: flip, scale, axial/y/x rotations, then x/y/z translation
AffineParams sample_affine(const AugmentConfig& cfg, Rng& rng);
GeometricResult random_geometric(const Volume& vol, const std::vector<InstanceAnnotation>& anns,
                                 const AugmentConfig& cfg, Rng& rng);

// Area interpolation along the slice axis to the coarse thickness and back,
// fractional-bin averaging in both directions so the global mean is kept.
// Targets at or below the native spacing are a no-op.
Volume slice_thickness_transform(const Volume& vol, double target_thickness_mm);

// Cubic Bezier remap of min-max normalized intensities through a 1024-entry
// LUT anchored at (0,0) and (1,1); samples are ordered by x so a backtracking
// curve yields a (locally) non-monotone remap. Diagonal control points give
// the identity. Constant volumes pass through unchanged.
Volume bezier_remap(const Volume& vol, const std::array<double, 2>& p1,
                    const std::array<double, 2>& p2);

// draw order: slice thickness, then the four control-point offsets
Volume random_appearance(const Volume& vol, const AugmentConfig& cfg, Rng& rng);

// linear interpolation on the sorted sample, q in [0, 100]
double percentile_sorted(const std::vector<float>& sorted, double q);

// clip to the [0.5, 99.5] percentile range, then z-score with the population
// std; zero spread maps to all zeros
Volume clip_normalize(const Volume& vol);

} // namespace strokekit
