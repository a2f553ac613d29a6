#pragma once

#include <cmath>
#include <vector>

#include "strokekit/dataset.hpp"
#include "strokekit/rng.hpp"

namespace strokekit {

// Synthetic "brain" volumes: an ellipsoid of tissue with a mirror-symmetric
// intensity profile, darkened by ellipsoidal lesions whose contrast and
// edge softness follow a documented logistic law of log-age.
struct PhantomSpec {
    int width = 64, height = 64, slices = 16;
    std::array<double, 3> spacing{1, 1, 1};

    int min_lesions = 1, max_lesions = 3;
    double min_radius_mm = 3, max_radius_mm = 7;

    double min_age_minutes = 30, max_age_minutes = 8640; // log-uniform
    double multi_age_prob = 0.15; // chance a multi-lesion subject mixes ages

    // contrast(a) = law_base + law_gain * sigmoid((ln a - law_mid_log)/law_scale)
    double law_base = 0.06, law_gain = 0.24;
    double law_mid_log = std::log(500.0), law_scale = 1.0;
    // edge_width(a) = edge_base + edge_gain * sigmoid(same argument)
    double edge_base = 0.05, edge_gain = 0.15;

    double noise = 0.03;
    int max_place_retries = 200;
};

// The appearance law and its exact inverse (used by the learnability
// oracle): age in minutes <-> lesion center contrast.
double lesion_contrast(const PhantomSpec& spec, double age_minutes);
double lesion_edge_width(const PhantomSpec& spec, double age_minutes);
double invert_contrast(const PhantomSpec& spec, double contrast);

// Log-uniform age draw on [min_age_minutes, max_age_minutes].
double sample_age(const PhantomSpec& spec, Rng& rng);

// Background tissue value at a voxel, 0 outside the brain ellipsoid.
// Mirror-symmetric in x so the contralateral side carries the reference
// intensity.
double phantom_background(const PhantomSpec& spec, int x, int y, int z);

struct Phantom {
    Volume volume;
    std::vector<InstanceAnnotation> annotations;
};

// Places lesions wholly inside the brain with disjoint masks, retrying up
// to max_place_retries before giving up with GenerationError.
Phantom generate_phantom(const PhantomSpec& spec, Rng& rng);

} // namespace strokekit
