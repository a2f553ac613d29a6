#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace strokekit {

// Binary masks are row-major byte vectors; nonzero means foreground.
// Both-empty pairs score 1 by convention. Undefined scores (empty class,
// constant truth) come back as nullopt rather than a sentinel number.

double dsc(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth);
double iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth);

// Lesion detection accuracy: lesions[i][j] is instance i's mask on slice j
// (empty vector = absent from that slice); pred[j] is the combined
// predicted foreground. An instance is detected iff any of its pixels is
// predicted anywhere. No instances -> nullopt.
std::optional<double> ld_acc(const std::vector<std::vector<std::vector<std::uint8_t>>>& lesions,
                             const std::vector<std::vector<std::uint8_t>>& pred);

// Age threshold for the 4.5 h acute window, in log-minutes.
double acute_threshold();

// Balanced accuracy of acute-vs-nonacute classification: mean of the two
// per-class recalls. A class with no members -> nullopt.
std::optional<double> acc_4p5h(const std::vector<double>& true_ages,
                               const std::vector<double>& pred_ages,
                               double threshold = acute_threshold());

// Pairwise (Mann-Whitney) AUC over (acute, non-acute) pairs: a pair counts
// 1 when the non-acute prediction is larger, 0.5 on ties. The literal flag
// scores the opposite orientation. Single-class input -> nullopt.
std::optional<double> auc_pairwise(const std::vector<double>& true_ages,
                                   const std::vector<double>& pred_ages,
                                   double threshold = acute_threshold(), bool literal = false);

struct RegressionScores {
    std::optional<double> r2; // nullopt for constant truth
    double mae = 0;
    double rmse = 0;
};

RegressionScores regression_scores(const std::vector<double>& truth,
                                   const std::vector<double>& pred);

struct MetricValue {
    std::string name;
    std::optional<double> value;
};

// Aligned two-column text table; undefined values print as "undefined".
std::string metrics_table(const std::vector<MetricValue>& rows);
// Machine-readable "name value" lines with 6-digit fixed precision.
std::string metrics_kv(const std::vector<MetricValue>& rows);

} // namespace strokekit
