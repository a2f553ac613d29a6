#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "strokekit/boxes.hpp"
#include "strokekit/error.hpp"
#include "strokekit/hungarian.hpp"
#include "strokekit/ops.hpp"
#include "strokekit/rng.hpp"
#include "strokekit/tensor.hpp"

namespace strokekit {

// Ground-truth instance. The box is the tight normalized (cx, cy, w, h)
// bound of the mask; age is in log-minutes.
template <typename T>
struct InstanceLabel {
    std::array<double, 4> box{};
    Tensor<T> mask; // [H, W], values in {0, 1}
    double age = 0;
};

// Relative weights of the three assignment-cost terms.
struct MatchCosts {
    double cls = 1.0;
    double l1 = 5.0;
    double giou = 2.0;
};

// One (query, label) pair per ground-truth instance, in label order.
struct MatchAssignment {
    std::vector<std::pair<int, int>> pairs;

    std::vector<int> queries() const {
        std::vector<int> q;
        q.reserve(pairs.size());
        for (const auto& p : pairs) q.push_back(p.first);
        return q;
    }
};

// Assignment cost for one (label, query) candidate; lower is better.
// Probabilities and boxes are read as plain values: the assignment itself
// carries no gradient.
template <typename T>
double match_cost(double lesion_prob, const std::array<double, 4>& pred_box,
                  const std::array<double, 4>& true_box, const MatchCosts& c) {
    double l1 = 0;
    for (int i = 0; i < 4; ++i) l1 += std::abs(pred_box[i] - true_box[i]);
    l1 /= 4;
    const Box pb = Box::from_cxcywh(pred_box[0], pred_box[1], pred_box[2], pred_box[3]);
    const Box tb = Box::from_cxcywh(true_box[0], true_box[1], true_box[2], true_box[3]);
    return c.cls * (-lesion_prob) + c.l1 * l1 + c.giou * (-box_giou(pb, tb));
}

// Optimal one-to-one assignment of labels to queries. lesion_logits is
// [N, 2] (class 0 = lesion), boxes is [N, 4].
template <typename T>
MatchAssignment hungarian_match(const Tensor<T>& lesion_logits, const Tensor<T>& boxes,
                                const std::vector<InstanceLabel<T>>& labels,
                                const MatchCosts& costs = {}) {
    SK_CHECK(lesion_logits.rank() == 2 && lesion_logits.extent(1) == 2, ShapeError,
             "hungarian_match: lesion logits must be [N, 2], got "
                 << shape_str(lesion_logits.shape()));
    const int n = lesion_logits.extent(0);
    SK_CHECK(boxes.rank() == 2 && boxes.extent(0) == n && boxes.extent(1) == 4, ShapeError,
             "hungarian_match: boxes must be [" << n << ", 4], got "
                                                << shape_str(boxes.shape()));
    const int l = static_cast<int>(labels.size());
    SK_CHECK(l <= n, CapacityError,
             "hungarian_match: " << l << " instances exceed " << n << " queries");
    if (l == 0) return {};

    const auto ld = lesion_logits.data();
    const auto bd = boxes.data();
    std::vector<double> prob(static_cast<size_t>(n));
    for (int q = 0; q < n; ++q) {
        const double a = ld[q * 2], b = ld[q * 2 + 1];
        const double m = std::max(a, b);
        const double za = std::exp(a - m), zb = std::exp(b - m);
        prob[static_cast<size_t>(q)] = za / (za + zb);
    }

    std::vector<std::vector<double>> cost(static_cast<size_t>(l),
                                          std::vector<double>(static_cast<size_t>(n)));
    for (int i = 0; i < l; ++i) {
        for (int q = 0; q < n; ++q) {
            std::array<double, 4> pb{};
            for (int k = 0; k < 4; ++k) pb[static_cast<size_t>(k)] = bd[q * 4 + k];
            cost[static_cast<size_t>(i)][static_cast<size_t>(q)] =
                match_cost<T>(prob[static_cast<size_t>(q)], pb, labels[static_cast<size_t>(i)].box,
                              costs);
        }
    }

    const auto asg = hungarian_solve(cost);
    MatchAssignment out;
    out.pairs.reserve(static_cast<size_t>(l));
    for (int i = 0; i < l; ++i) out.pairs.emplace_back(asg[static_cast<size_t>(i)], i);
    return out;
}

// Classification loss: mean over queries of cross entropy against class 0
// for matched queries and class 1 (no lesion) otherwise. The combined
// objective uses the per-query sum, i.e. N times this value.
template <typename T>
Tensor<T> loss_lesion_ce(const Tensor<T>& lesion_logits, const MatchAssignment& match) {
    const int n = lesion_logits.extent(0);
    std::vector<int> targets(static_cast<size_t>(n), 1);
    for (const auto& [q, l] : match.pairs) {
        SK_CHECK(q >= 0 && q < n, ContractError, "loss_lesion_ce: query " << q << " out of range");
        targets[static_cast<size_t>(q)] = 0;
    }
    return ops::mean(ops::softmax_xent_rows(lesion_logits, std::move(targets)));
}

namespace detail {

template <typename T>
Tensor<T> const_row(const std::array<double, 4>& v) {
    return Tensor<T>::from({1, 4}, {static_cast<T>(v[0]), static_cast<T>(v[1]),
                                    static_cast<T>(v[2]), static_cast<T>(v[3])});
}

} // namespace detail

// Mean absolute coordinate error between a predicted [1, 4] box and its
// (cx, cy, w, h) target.
template <typename T>
Tensor<T> loss_bbox_l1(const Tensor<T>& pred_box, const std::array<double, 4>& true_box) {
    SK_CHECK(pred_box.rank() == 2 && pred_box.extent(0) == 1 && pred_box.extent(1) == 4,
             ShapeError, "loss_bbox_l1: pred box must be [1, 4], got "
                             << shape_str(pred_box.shape()));
    return ops::mean(ops::abs_(ops::sub(pred_box, detail::const_row<T>(true_box))));
}

// 1 - GIoU between a predicted [1, 4] box and its target, built from
// differentiable primitives. Degenerate boxes are kept finite by the eps
// in both denominators.
template <typename T>
Tensor<T> loss_giou(const Tensor<T>& pred_box, const std::array<double, 4>& true_box,
                    T eps = static_cast<T>(1e-7)) {
    SK_CHECK(pred_box.rank() == 2 && pred_box.extent(0) == 1 && pred_box.extent(1) == 4,
             ShapeError, "loss_giou: pred box must be [1, 4], got "
                             << shape_str(pred_box.shape()));
    using namespace ops;
    const auto cx = cols(pred_box, 0, 1), cy = cols(pred_box, 1, 2);
    const auto w = cols(pred_box, 2, 3), h = cols(pred_box, 3, 4);
    const auto x1 = sub(cx, mul_scalar(w, T(0.5))), x2 = add(cx, mul_scalar(w, T(0.5)));
    const auto y1 = sub(cy, mul_scalar(h, T(0.5))), y2 = add(cy, mul_scalar(h, T(0.5)));

    const Box tb = Box::from_cxcywh(true_box[0], true_box[1], true_box[2], true_box[3]);
    auto c1 = [](T v) { return Tensor<T>::full({1, 1}, v); };
    const auto tx1 = c1(static_cast<T>(tb.x1)), tx2 = c1(static_cast<T>(tb.x2));
    const auto ty1 = c1(static_cast<T>(tb.y1)), ty2 = c1(static_cast<T>(tb.y2));

    const auto iw = relu(sub(min_(x2, tx2), max_(x1, tx1)));
    const auto ih = relu(sub(min_(y2, ty2), max_(y1, ty1)));
    const auto inter = mul(iw, ih);
    const auto area_p = mul(relu(w), relu(h));
    const auto uni = sub(add_scalar(area_p, static_cast<T>(tb.area())), inter);
    const auto iou = div(inter, add_scalar(uni, eps));

    const auto enc_w = sub(max_(x2, tx2), min_(x1, tx1));
    const auto enc_h = sub(max_(y2, ty2), min_(y1, ty1));
    const auto enc = mul(enc_w, enc_h);
    const auto giou = sub(iou, div(sub(enc, uni), add_scalar(enc, eps)));
    return sum(add_scalar(neg(giou), T(1)));
}

// Focal loss, mean over pixels. mask_logits and true_mask share a shape;
// true_mask holds 0/1 values and receives no gradient.
template <typename T>
Tensor<T> loss_focal(const Tensor<T>& mask_logits, const Tensor<T>& true_mask,
                     T alpha = static_cast<T>(0.25), T gamma = static_cast<T>(2)) {
    SK_CHECK(mask_logits.shape() == true_mask.shape(), ShapeError,
             "loss_focal: shape mismatch " << shape_str(mask_logits.shape()) << " vs "
                                           << shape_str(true_mask.shape()));
    using namespace ops;
    const auto p = sigmoid(mask_logits);
    // softplus(-x) = -log sigmoid(x); softplus(x) = -log(1 - sigmoid(x))
    const auto pos = mul(pow_scalar(add_scalar(neg(p), T(1)), gamma), softplus(neg(mask_logits)));
    const auto neg_t = mul(pow_scalar(p, gamma), softplus(mask_logits));
    const auto y = true_mask;
    const auto one_minus_y = add_scalar(neg(y), T(1));
    const auto weighted =
        add(mul_scalar(mul(y, pos), alpha), mul_scalar(mul(one_minus_y, neg_t), T(1) - alpha));
    return mean(weighted);
}

// Soft Dice loss 1 - (2|P.Y| + eps) / (|P| + |Y| + eps) over sigmoid
// probabilities.
template <typename T>
Tensor<T> loss_dice(const Tensor<T>& mask_logits, const Tensor<T>& true_mask,
                    T eps = static_cast<T>(1)) {
    SK_CHECK(mask_logits.shape() == true_mask.shape(), ShapeError,
             "loss_dice: shape mismatch " << shape_str(mask_logits.shape()) << " vs "
                                          << shape_str(true_mask.shape()));
    using namespace ops;
    const auto p = sigmoid(mask_logits);
    const auto num = add_scalar(mul_scalar(sum(mul(p, true_mask)), T(2)), eps);
    const auto den = add_scalar(add(sum(p), sum(true_mask)), eps);
    return add_scalar(neg(div(num, den)), T(1));
}

// Quantile levels: the Gaussian CDF at -1, 0, +1, so that under a normal
// error model the outer predictions straddle one standard deviation.
inline std::array<double, 3> quantile_taus() {
    const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
    return {1.0 - phi1, 0.5, phi1};
}

// Pinball loss of the three predicted quantiles [1, 3] against a scalar
// age, summed over levels: max(tau * e, (tau - 1) * e) with e = a - ahat.
// The literal variant scores max(tau * |e|, (1 - tau) * |e|) instead,
// penalizing even a correctly-sided miss by the larger factor.
template <typename T>
Tensor<T> loss_quantile(const Tensor<T>& pred_quantiles, double true_age, bool literal = false) {
    SK_CHECK(pred_quantiles.rank() == 2 && pred_quantiles.extent(0) == 1 &&
                 pred_quantiles.extent(1) == 3,
             ShapeError, "loss_quantile: predictions must be [1, 3], got "
                             << shape_str(pred_quantiles.shape()));
    using namespace ops;
    const auto taus = quantile_taus();
    const auto tau = Tensor<T>::from({1, 3}, {static_cast<T>(taus[0]), static_cast<T>(taus[1]),
                                              static_cast<T>(taus[2])});
    const auto tau_m1 = add_scalar(tau, T(-1));
    const auto one_m_tau = neg(tau_m1);
    const auto e = sub(Tensor<T>::full({1, 3}, static_cast<T>(true_age)), pred_quantiles);
    if (literal) {
        const auto ae = abs_(e);
        return sum(max_(mul(tau, ae), mul(one_m_tau, ae)));
    }
    return sum(max_(mul(tau, e), mul(tau_m1, e)));
}

// Multi-task weights; sampled weights are a Dirichlet(1) point on the
// 6-simplex.
struct LossWeights {
    double lp = 1, lb = 1, lg = 1, la = 1, lf = 1, ld = 1;
};

inline LossWeights rlw_weights(Rng& rng) {
    std::array<double, 6> e{};
    double s = 0;
    for (auto& x : e) {
        x = rng.exponential();
        s += x;
    }
    return {e[0] / s, e[1] / s, e[2] / s, e[3] / s, e[4] / s, e[5] / s};
}

// Raw (unweighted) term values for logging: ce is summed over all queries,
// the rest over matched pairs.
struct TermReport {
    double ce = 0, l1 = 0, giou = 0, quantile = 0, focal = 0, dice = 0;
};

// One sample's weighted loss, before division by the batch lesion count.
template <typename T>
struct SampleLoss {
    Tensor<T> weighted;
    int lesions = 0;
    TermReport report;
};

namespace detail {

template <typename T>
Tensor<T> fold_add(const std::vector<Tensor<T>>& v) {
    Tensor<T> acc = v[0];
    for (size_t i = 1; i < v.size(); ++i) acc = ops::add(acc, v[i]);
    return acc;
}

} // namespace detail

// Weighted multi-task objective for one sample. matched_masks is [K, H, W]
// mask logits aligned with match.pairs (pass nullptr iff there are no
// pairs). The classification term sums cross entropy over all queries; the
// box, age and mask terms sum over matched pairs. Normalization by the
// batch lesion count happens in batch_total.
template <typename T>
SampleLoss<T> combined_loss(const Tensor<T>& lesion_logits, const Tensor<T>& boxes,
                            const Tensor<T>& ages, const Tensor<T>* matched_masks,
                            const MatchAssignment& match,
                            const std::vector<InstanceLabel<T>>& labels, const LossWeights& w,
                            bool literal_quantile = false) {
    using namespace ops;
    const int n = lesion_logits.extent(0);
    const int k = static_cast<int>(match.pairs.size());
    SK_CHECK(k == static_cast<int>(labels.size()), ContractError,
             "combined_loss: " << k << " pairs for " << labels.size() << " labels");
    if (k > 0) {
        SK_CHECK(matched_masks != nullptr, ContractError,
                 "combined_loss: matched pairs but no mask logits");
        SK_CHECK(matched_masks->rank() == 3 && matched_masks->extent(0) == k, ShapeError,
                 "combined_loss: mask logits must be [" << k << ", H, W], got "
                                                        << shape_str(matched_masks->shape()));
    }

    const auto ce = mul_scalar(loss_lesion_ce(lesion_logits, match), static_cast<T>(n));
    SampleLoss<T> out{mul_scalar(ce, static_cast<T>(w.lp)), k, {}};
    out.report.ce = static_cast<double>(ce.item());
    if (k == 0) return out;

    std::vector<Tensor<T>> l1s, gis, qas, fos, dis;
    for (int i = 0; i < k; ++i) {
        const auto [q, l] = match.pairs[static_cast<size_t>(i)];
        const auto& lab = labels[static_cast<size_t>(l)];
        const auto pb = slice0(boxes, q, q + 1);
        l1s.push_back(loss_bbox_l1(pb, lab.box));
        gis.push_back(loss_giou(pb, lab.box));
        qas.push_back(loss_quantile(slice0(ages, q, q + 1), lab.age, literal_quantile));
        const auto ml = reshape(slice0(*matched_masks, i, i + 1), lab.mask.shape());
        fos.push_back(loss_focal(ml, lab.mask));
        dis.push_back(loss_dice(ml, lab.mask));
    }
    const auto l1 = strokekit::detail::fold_add(l1s);
    const auto gi = strokekit::detail::fold_add(gis);
    const auto qa = strokekit::detail::fold_add(qas);
    const auto fo = strokekit::detail::fold_add(fos);
    const auto di = strokekit::detail::fold_add(dis);
    out.report.l1 = static_cast<double>(l1.item());
    out.report.giou = static_cast<double>(gi.item());
    out.report.quantile = static_cast<double>(qa.item());
    out.report.focal = static_cast<double>(fo.item());
    out.report.dice = static_cast<double>(di.item());

    auto wsum = add(out.weighted, mul_scalar(l1, static_cast<T>(w.lb)));
    wsum = add(wsum, mul_scalar(gi, static_cast<T>(w.lg)));
    wsum = add(wsum, mul_scalar(qa, static_cast<T>(w.la)));
    wsum = add(wsum, mul_scalar(fo, static_cast<T>(w.lf)));
    wsum = add(wsum, mul_scalar(di, static_cast<T>(w.ld)));
    out.weighted = wsum;
    return out;
}

// Batch objective: sum of per-sample weighted losses divided by
// max(1, total lesion count), so lesion-free batches still train the
// classifier.
template <typename T>
Tensor<T> batch_total(const std::vector<SampleLoss<T>>& parts) {
    SK_CHECK(!parts.empty(), ContractError, "batch_total: empty batch");
    int lesions = 0;
    std::vector<Tensor<T>> ws;
    ws.reserve(parts.size());
    for (const auto& p : parts) {
        lesions += p.lesions;
        ws.push_back(p.weighted);
    }
    return ops::mul_scalar(detail::fold_add(ws), T(1) / static_cast<T>(std::max(1, lesions)));
}

} // namespace strokekit
