#include "strokekit/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

#include "strokekit/augment.hpp"
#include "strokekit/resample.hpp"

namespace strokekit {
namespace {

// nearest-neighbour mask transfer between grids, identity when they match
std::vector<std::uint8_t> mask_to_grid(const std::vector<std::uint8_t>& src, int sh, int sw,
                                       int dh, int dw) {
    if (sh == dh && sw == dw) return src;
    const auto rows = nearest_plan(sh, dh);
    const auto cols = nearest_plan(sw, dw);
    std::vector<std::uint8_t> dst(static_cast<size_t>(dh) * dw, 0);
    for (int y = 0; y < dh; ++y) {
        const int sy = rows[static_cast<size_t>(y)][0].src;
        for (int x = 0; x < dw; ++x)
            dst[static_cast<size_t>(y) * dw + x] =
                src[static_cast<size_t>(sy) * sw + cols[static_cast<size_t>(x)][0].src];
    }
    return dst;
}

} // namespace

Tensor<double> slice_tensor(const Volume& vol, int slice, int out_h, int out_w) {
    SK_CHECK(slice >= 0 && slice < vol.slices, InputError,
             "slice " << slice << " outside volume of " << vol.slices);
    SK_CHECK(out_h > 0 && out_w > 0, ConfigError, "slice_tensor: empty target grid");
    const auto rows = linear_plan(vol.height, out_h);
    const auto cols = linear_plan(vol.width, out_w);
    // separable: resample rows into a temp plane, then columns
    std::vector<double> tmp(static_cast<size_t>(out_h) * vol.width, 0.0);
    for (int yo = 0; yo < out_h; ++yo)
        for (const auto& t : rows[yo])
            for (int x = 0; x < vol.width; ++x)
                tmp[static_cast<size_t>(yo) * vol.width + x] +=
                    t.w * vol.at(slice, t.src, x);
    auto out = Tensor<double>::zeros({1, out_h, out_w});
    auto o = out.raw();
    for (int yo = 0; yo < out_h; ++yo)
        for (int xo = 0; xo < out_w; ++xo) {
            double v = 0;
            for (const auto& t : cols[xo]) v += t.w * tmp[static_cast<size_t>(yo) * vol.width + t.src];
            o[static_cast<size_t>(yo) * out_w + xo] = v;
        }
    return out;
}

std::vector<InstanceLabel<double>> slice_labels(const std::vector<InstanceAnnotation>& anns,
                                                int width, int height, int slice, int out_h,
                                                int out_w) {
    const auto rows = nearest_plan(height, out_h);
    const auto cols = nearest_plan(width, out_w);
    std::vector<InstanceLabel<double>> labels;
    for (const auto& ann : anns) {
        const SliceMask* sm = nullptr;
        for (const auto& m : ann.slices)
            if (m.slice == slice) {
                sm = &m;
                break;
            }
        if (!sm) continue;
        const auto src = rle_decode(sm->runs, width * height);
        std::vector<std::uint8_t> dst(static_cast<size_t>(out_h) * out_w, 0);
        bool any = false;
        for (int y = 0; y < out_h; ++y) {
            const int sy = rows[y][0].src;
            for (int x = 0; x < out_w; ++x) {
                const std::uint8_t v = src[static_cast<size_t>(sy) * width + cols[x][0].src];
                dst[static_cast<size_t>(y) * out_w + x] = v;
                any = any || v;
            }
        }
        if (!any) continue;
        InstanceLabel<double> lab;
        lab.box = tight_box(dst, out_h, out_w);
        lab.mask = Tensor<double>::zeros({out_h, out_w});
        auto m = lab.mask.raw();
        for (size_t i = 0; i < dst.size(); ++i) m[i] = dst[i];
        lab.age = ann.age_log;
        labels.push_back(std::move(lab));
    }
    return labels;
}

std::vector<int> lesion_slices(const std::vector<InstanceAnnotation>& anns) {
    std::vector<int> out;
    for (const auto& ann : anns)
        for (const auto& m : ann.slices) out.push_back(m.slice);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

SliceMasks predict_slice(const Model<double>& model, const Volume& norm, int slice,
                         double prob_threshold) {
    const auto& cfg = model.config();
    const auto input = slice_tensor(norm, slice, cfg.image_h, cfg.image_w);
    const auto core = model.forward_core(input);

    std::vector<int> selected;
    for (int q = 0; q < cfg.num_queries; ++q) {
        // two-class softmax, class 0 = lesion; the margin form never overflows
        const double margin = core.lesion_logits.at(q, 1) - core.lesion_logits.at(q, 0);
        if (1.0 / (1.0 + std::exp(margin)) > prob_threshold) selected.push_back(q);
    }
    SliceMasks out;
    if (selected.empty()) return out;

    const auto logits = model.masks_for(core, selected); // [K,H,W]
    const int mh = logits.extent(1), mw = logits.extent(2);
    for (size_t k = 0; k < selected.size(); ++k) {
        QueryMask qm;
        qm.query = selected[k];
        qm.quantiles = {core.ages.at(selected[k], 0), core.ages.at(selected[k], 1),
                        core.ages.at(selected[k], 2)};
        std::vector<std::uint8_t> m(static_cast<size_t>(mh) * mw, 0);
        for (int y = 0; y < mh; ++y)
            for (int x = 0; x < mw; ++x)
                m[static_cast<size_t>(y) * mw + x] =
                    logits.at(static_cast<int>(k), y, x) > 0 ? 1 : 0;
        qm.mask = mask_to_grid(m, mh, mw, norm.height, norm.width);
        out.push_back(std::move(qm));
    }
    return out;
}

VolumeInference predict_volume(const Model<double>& model, const Volume& vol,
                               const InferOptions& opt) {
    SK_CHECK(opt.prob_threshold > 0 && opt.prob_threshold < 1, ConfigError,
             "prob_threshold must lie in (0,1), got " << opt.prob_threshold);
    SK_CHECK(opt.threads >= 1, ConfigError, "threads must be >= 1");
    const Volume norm = clip_normalize(vol);

    VolumeInference out;
    out.slices.assign(static_cast<size_t>(vol.slices), {});
    const int threads = std::min(opt.threads, vol.slices);
    if (threads <= 1) {
        for (int s = 0; s < vol.slices; ++s)
            out.slices[static_cast<size_t>(s)] =
                predict_slice(model, norm, s, opt.prob_threshold);
    } else {
        std::atomic<int> next{0};
        std::exception_ptr err;
        std::mutex err_mu;
        auto work = [&] {
            for (;;) {
                const int s = next.fetch_add(1);
                if (s >= vol.slices) return;
                try {
                    out.slices[static_cast<size_t>(s)] =
                        predict_slice(model, norm, s, opt.prob_threshold);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(err_mu);
                    if (!err) err = std::current_exception();
                    return;
                }
            }
        };
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(threads));
        for (int t = 0; t < threads; ++t) pool.emplace_back(work);
        for (auto& t : pool) t.join();
        if (err) std::rethrow_exception(err);
    }
    out.instances = connected_components_3d(out.slices, vol.height, vol.width, opt.connectivity);
    fuse_instance_ages(out.instances);
    return out;
}

std::vector<SliceMasks> oracle_slices(const std::vector<InstanceAnnotation>& anns, int width,
                                      int height, int slices) {
    SK_CHECK(width > 0 && height > 0 && slices > 0, InputError, "oracle_slices: empty volume");
    std::vector<SliceMasks> out(static_cast<size_t>(slices));
    for (size_t i = 0; i < anns.size(); ++i)
        for (const auto& sm : anns[i].slices) {
            SK_CHECK(sm.slice >= 0 && sm.slice < slices, InputError,
                     "annotation touches slice " << sm.slice << " outside volume of " << slices);
            QueryMask qm;
            qm.query = static_cast<int>(i);
            qm.quantiles = {anns[i].age_log, anns[i].age_log, anns[i].age_log};
            qm.mask = rle_decode(sm.runs, width * height);
            out[static_cast<size_t>(sm.slice)].push_back(std::move(qm));
        }
    return out;
}

EvalReport evaluate_records(const Model<double>* model,
                            const std::vector<DatasetRecord>& records,
                            const EvalOptions& opt) {
    SK_CHECK(model || opt.oracle, ContractError, "evaluate_records needs a model unless oracle");
    EvalReport rep;
    std::vector<double> subj_dsc, subj_iou;
    long detected = 0, instances_total = 0;
    std::vector<double>& age_true = rep.pair_true;
    std::vector<double>& age_pred = rep.pair_pred;

    for (const auto& rec : records) {
        const Volume& vol = rec.volume;
        const size_t plane = static_cast<size_t>(vol.height) * vol.width;

        std::vector<SliceMasks> pred_slices;
        std::vector<LesionInstance3D> instances;
        if (opt.oracle) {
            pred_slices = oracle_slices(rec.annotations, vol.width, vol.height, vol.slices);
            instances = connected_components_3d(pred_slices, vol.height, vol.width,
                                                opt.infer.connectivity);
            fuse_instance_ages(instances);
        } else {
            auto inf = predict_volume(*model, vol, opt.infer);
            pred_slices = std::move(inf.slices);
            instances = std::move(inf.instances);
        }

        // combined predicted foreground, per slice and flattened
        std::vector<std::vector<std::uint8_t>> pred_by_slice(
            static_cast<size_t>(vol.slices), std::vector<std::uint8_t>(plane, 0));
        for (size_t s = 0; s < pred_by_slice.size(); ++s)
            for (const auto& qm : pred_slices[s])
                for (size_t i = 0; i < plane; ++i)
                    if (qm.mask[i]) pred_by_slice[s][i] = 1;
        std::vector<std::uint8_t> pred_flat;
        pred_flat.reserve(plane * static_cast<size_t>(vol.slices));
        for (const auto& p : pred_by_slice) pred_flat.insert(pred_flat.end(), p.begin(), p.end());

        std::vector<std::uint8_t> true_flat(plane * static_cast<size_t>(vol.slices), 0);
        for (const auto& ann : rec.annotations)
            for (const auto& sm : ann.slices) {
                const auto m = rle_decode(sm.runs, static_cast<int>(plane));
                auto* dst = true_flat.data() + static_cast<size_t>(sm.slice) * plane;
                for (size_t i = 0; i < plane; ++i)
                    if (m[i]) dst[i] = 1;
            }

        subj_dsc.push_back(dsc(pred_flat, true_flat));
        subj_iou.push_back(iou(pred_flat, true_flat));

        // detection pooled one instance at a time, so counts stay exact
        for (const auto& ann : rec.annotations) {
            std::vector<std::vector<std::uint8_t>> row(static_cast<size_t>(vol.slices));
            for (const auto& sm : ann.slices)
                row[static_cast<size_t>(sm.slice)] = rle_decode(sm.runs, static_cast<int>(plane));
            const auto f = ld_acc({row}, pred_by_slice);
            detected += (f && *f > 0.5) ? 1 : 0;
            ++instances_total;
        }

        // age regression: single-age subjects with at least one prediction;
        // the subject estimate fuses every instance member's quantiles
        if (rec.annotations.empty()) continue;
        bool single_age = true;
        for (const auto& ann : rec.annotations)
            single_age = single_age && ann.age_log == rec.annotations.front().age_log;
        if (!single_age || instances.empty()) continue;
        std::vector<std::array<double, 3>> qs;
        for (const auto& inst : instances)
            qs.insert(qs.end(), inst.quantiles.begin(), inst.quantiles.end());
        rep.pair_subject.push_back(rec.subject);
        age_true.push_back(rec.annotations.front().age_log);
        age_pred.push_back(fuse_age_estimates(qs));
    }

    const auto mean_of = [](const std::vector<double>& v) -> std::optional<double> {
        if (v.empty()) return std::nullopt;
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };

    std::vector<MetricValue>& rows = rep.metrics;
    rows.push_back({"subjects", static_cast<double>(records.size())});
    rows.push_back({"dsc", mean_of(subj_dsc)});
    rows.push_back({"iou", mean_of(subj_iou)});
    rows.push_back({"ld_acc", instances_total != 0
                                  ? std::optional<double>(static_cast<double>(detected) /
                                                          static_cast<double>(instances_total))
                                  : std::nullopt});
    rows.push_back({"acc_4p5h", acc_4p5h(age_true, age_pred)});
    rows.push_back({"auc", auc_pairwise(age_true, age_pred)});
    if (age_true.empty()) {
        rows.push_back({"r2", std::nullopt});
        rows.push_back({"mae", std::nullopt});
        rows.push_back({"rmse", std::nullopt});
    } else {
        const auto reg = regression_scores(age_true, age_pred);
        rows.push_back({"r2", reg.r2});
        rows.push_back({"mae", reg.mae});
        rows.push_back({"rmse", reg.rmse});
    }
    return rep;
}

} // namespace strokekit
