#include "strokekit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "strokekit/error.hpp"

namespace strokekit {

namespace {

struct Overlap {
    long a = 0, b = 0, both = 0;
};

Overlap count_overlap(const std::vector<std::uint8_t>& pred,
                      const std::vector<std::uint8_t>& truth) {
    SK_CHECK(pred.size() == truth.size(), ShapeError,
             "mask extents differ: " << pred.size() << " vs " << truth.size());
    Overlap o;
    for (size_t i = 0; i < pred.size(); ++i) {
        o.a += pred[i] != 0;
        o.b += truth[i] != 0;
        o.both += (pred[i] && truth[i]) ? 1 : 0;
    }
    return o;
}

} // namespace

double dsc(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
    const auto o = count_overlap(pred, truth);
    if (o.a + o.b == 0) return 1.0;
    return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.a + o.b);
}

double iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
    const auto o = count_overlap(pred, truth);
    const long uni = o.a + o.b - o.both;
    if (uni == 0) return 1.0;
    return static_cast<double>(o.both) / static_cast<double>(uni);
}

std::optional<double> ld_acc(const std::vector<std::vector<std::vector<std::uint8_t>>>& lesions,
                             const std::vector<std::vector<std::uint8_t>>& pred) {
    if (lesions.empty()) return std::nullopt;
    long detected = 0;
    for (const auto& lesion : lesions) {
        SK_CHECK(lesion.size() == pred.size(), ShapeError,
                 "ld_acc: instance spans " << lesion.size() << " slices, predictions "
                                           << pred.size());
        bool hit = false;
        for (size_t j = 0; j < lesion.size() && !hit; ++j) {
            if (lesion[j].empty()) continue;
            SK_CHECK(lesion[j].size() == pred[j].size(), ShapeError,
                     "ld_acc: slice " << j << " extent mismatch");
            for (size_t i = 0; i < lesion[j].size(); ++i) {
                if (lesion[j][i] && pred[j][i]) {
                    hit = true;
                    break;
                }
            }
        }
        detected += hit ? 1 : 0;
    }
    return static_cast<double>(detected) / static_cast<double>(lesions.size());
}

double acute_threshold() { return std::log(270.0); }

std::optional<double> acc_4p5h(const std::vector<double>& true_ages,
                               const std::vector<double>& pred_ages, double threshold) {
    SK_CHECK(true_ages.size() == pred_ages.size(), ShapeError,
             "acc_4p5h: " << true_ages.size() << " truths vs " << pred_ages.size()
                          << " predictions");
    long n_ac = 0, n_non = 0, ok_ac = 0, ok_non = 0;
    for (size_t i = 0; i < true_ages.size(); ++i) {
        const bool acute = true_ages[i] <= threshold;
        const bool pred_acute = pred_ages[i] <= threshold;
        if (acute) {
            ++n_ac;
            ok_ac += pred_acute ? 1 : 0;
        } else {
            ++n_non;
            ok_non += pred_acute ? 0 : 1;
        }
    }
    if (n_ac == 0 || n_non == 0) return std::nullopt;
    return 0.5 * (static_cast<double>(ok_ac) / static_cast<double>(n_ac) +
                  static_cast<double>(ok_non) / static_cast<double>(n_non));
}

std::optional<double> auc_pairwise(const std::vector<double>& true_ages,
                                   const std::vector<double>& pred_ages, double threshold,
                                   bool literal) {
    SK_CHECK(true_ages.size() == pred_ages.size(), ShapeError,
             "auc_pairwise: " << true_ages.size() << " truths vs " << pred_ages.size()
                              << " predictions");
    std::vector<double> acute, non;
    for (size_t i = 0; i < true_ages.size(); ++i)
        (true_ages[i] <= threshold ? acute : non).push_back(pred_ages[i]);
    if (acute.empty() || non.empty()) return std::nullopt;
    double s = 0;
    for (double a : acute)
        for (double b : non) {
            if (a == b)
                s += 0.5;
            else if (literal ? a > b : b > a)
                s += 1.0;
        }
    return s / (static_cast<double>(acute.size()) * static_cast<double>(non.size()));
}

RegressionScores regression_scores(const std::vector<double>& truth,
                                   const std::vector<double>& pred) {
    SK_CHECK(!truth.empty(), InputError, "regression_scores: empty input");
    SK_CHECK(truth.size() == pred.size(), ShapeError,
             "regression_scores: " << truth.size() << " truths vs " << pred.size()
                                   << " predictions");
    const auto n = static_cast<double>(truth.size());
    double mean_t = 0;
    for (double t : truth) mean_t += t;
    mean_t /= n;

    double ss_res = 0, ss_tot = 0, abs_sum = 0;
    for (size_t i = 0; i < truth.size(); ++i) {
        const double e = truth[i] - pred[i];
        ss_res += e * e;
        abs_sum += std::abs(e);
        ss_tot += (truth[i] - mean_t) * (truth[i] - mean_t);
    }

    RegressionScores out;
    out.mae = abs_sum / n;
    out.rmse = std::sqrt(ss_res / n);
    if (ss_tot > 0) out.r2 = 1.0 - ss_res / ss_tot;
    return out;
}

std::string metrics_table(const std::vector<MetricValue>& rows) {
    size_t w = 0;
    for (const auto& r : rows) w = std::max(w, r.name.size());
    std::ostringstream os;
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(w) + 2) << r.name;
        if (r.value)
            os << std::fixed << std::setprecision(4) << *r.value;
        else
            os << "undefined";
        os << "\n";
    }
    return os.str();
}

std::string metrics_kv(const std::vector<MetricValue>& rows) {
    std::ostringstream os;
    for (const auto& r : rows) {
        os << r.name << " ";
        if (r.value)
            os << std::fixed << std::setprecision(6) << *r.value;
        else
            os << "undefined";
        os << "\n";
    }
    return os.str();
}

} // namespace strokekit
