#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace strokekit {

// Piecewise Gaussian with a shared mode: scale sigma1 left of mu, sigma2
// right of it. Fits with a non-positive scale are carried as data, not
// errors.
struct SplitNormal {
    double mu = 0, sigma1 = 0, sigma2 = 0;
    bool valid = false;
};

// mu = q2, sigma1 = q2 - q1, sigma2 = q3 - q2; invalid when either scale
// is <= 0.
SplitNormal fit_split_normal(const std::array<double, 3>& quantiles);

// Density A exp(-(x-mu)^2 / (2 sigma^2)) with A = sqrt(2/pi)/(s1+s2) and
// the branch picked by the side of mu; integrates to 1.
double split_normal_pdf(const SplitNormal& sn, double x);

struct FuseOptions {
    // Default: any invalid fit sends the whole set to the mean of the mu.
    // With drop_invalid, invalid members are excluded and the rest fused;
    // the mean fallback then only applies when no member survives.
    bool drop_invalid = false;
};

// Argmax over x of the summed member densities, located by a 2048-point
// grid on [min mu - 4 max sigma1, max mu + 4 max sigma2] plus
// golden-section refinement; ties resolve to the smallest x.
double fuse_age_estimates(const std::vector<std::array<double, 3>>& quantile_sets,
                          const FuseOptions& opt = {});

// One query's thresholded mask on one slice, with its age quantiles.
struct QueryMask {
    int query = -1;
    std::array<double, 3> quantiles{};
    std::vector<std::uint8_t> mask; // h*w, row-major
};

using SliceMasks = std::vector<QueryMask>;

struct LesionInstance3D {
    std::vector<std::pair<int, int>> members; // (slice, query), sorted
    std::vector<std::array<double, 3>> quantiles; // aligned with members
    std::vector<std::array<int, 3>> voxels; // (slice, row, col), sorted
    double fused_age = 0;
};

// Union-find over the union of all member masks; each component collects
// every (slice, query) whose mask contributes at least one voxel to it.
// Connectivity is 6 or 26. fused_age is left for fuse_instance_ages.
std::vector<LesionInstance3D> connected_components_3d(const std::vector<SliceMasks>& slices,
                                                      int h, int w, int connectivity = 26);

void fuse_instance_ages(std::vector<LesionInstance3D>& instances, const FuseOptions& opt = {});

// One line per instance: id, voxel count, fused age in log-minutes and
// minutes, member list.
std::string export_instances_text(const std::vector<LesionInstance3D>& instances);

} // namespace strokekit
