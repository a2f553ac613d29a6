#pragma once

#include <vector>

#include "strokekit/age_fusion.hpp"
#include "strokekit/criterion.hpp"
#include "strokekit/dataset.hpp"
#include "strokekit/metrics.hpp"
#include "strokekit/network.hpp"
#include "strokekit/tensor.hpp"

namespace strokekit {

// [1, out_h, out_w] intensity slice, linearly resampled from the volume's
// in-plane extents; the identity when the extents already match.
Tensor<double> slice_tensor(const Volume& vol, int slice, int out_h, int out_w);

// Labels for instances present on the slice. Masks are nearest-resampled to
// the model grid, boxes recomputed from the resampled mask so supervision
// stays self-consistent; instances whose resampled mask vanishes are skipped.
std::vector<InstanceLabel<double>> slice_labels(const std::vector<InstanceAnnotation>& anns,
                                                int width, int height, int slice, int out_h,
                                                int out_w);

// ascending slice indices carrying at least one instance
std::vector<int> lesion_slices(const std::vector<InstanceAnnotation>& anns);

struct InferOptions {
    double prob_threshold = 0.5; // softmax lesion-probability gate
    int connectivity = 26;
    int threads = 1;
};

// Set predictions for one slice of an already normalized volume: queries
// whose lesion probability clears the gate keep their age quantiles and a
// binary mask (logit > 0), nearest-resampled back to the volume grid.
SliceMasks predict_slice(const Model<double>& model, const Volume& norm, int slice,
                         double prob_threshold = 0.5);

struct VolumeInference {
    std::vector<SliceMasks> slices; // one entry per volume slice
    std::vector<LesionInstance3D> instances;
};

// clip_normalize -> per-slice predictions -> 3d components -> fused ages
VolumeInference predict_volume(const Model<double>& model, const Volume& vol,
                               const InferOptions& opt = {});

// Ground truth rendered in prediction form: one query per instance, all
// three quantiles pinned to the true age, so it feeds the exact scoring
// path a model prediction would.
std::vector<SliceMasks> oracle_slices(const std::vector<InstanceAnnotation>& anns, int width,
                                      int height, int slices);

struct EvalOptions {
    InferOptions infer;
    bool oracle = false; // score ground truth against itself instead of the model
};

struct EvalReport {
    std::vector<MetricValue> metrics;
    // regression pairs, aligned: single-age subjects with >= 1 prediction
    std::vector<int> pair_subject;
    std::vector<double> pair_true, pair_pred; // log-minutes
};

// Metrics over a set of records: per-subject mean DSC/IOU, detection
// accuracy pooled over every instance, and age metrics restricted to
// single-age subjects with at least one predicted instance (their age
// estimate fuses the quantiles of every instance member). Metric rows, in
// order: subjects, dsc, iou, ld_acc, acc_4p5h, auc, r2, mae, rmse.
// `model` may be null only in oracle mode.
EvalReport evaluate_records(const Model<double>* model,
                            const std::vector<DatasetRecord>& records,
                            const EvalOptions& opt = {});

} // namespace strokekit
