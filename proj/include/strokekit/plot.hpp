#pragma once

#include <array>
#include <string>
#include <vector>

#include "strokekit/metrics.hpp"

namespace strokekit {

// ROC for the acute-vs-nonacute decision: positive class is true age at or
// below the threshold, and a LOWER predicted age ranks more acute. Tied
// predictions collapse into one diagonal segment, so the trapezoid area
// equals the pairwise (Mann-Whitney) AUC exactly.
struct RocCurve {
    std::vector<std::array<double, 2>> points; // (fpr, tpr), runs (0,0) -> (1,1)
    double auc = 0;                            // trapezoid area under the curve
};

RocCurve roc_curve(const std::vector<double>& true_ages, const std::vector<double>& pred_ages,
                   double threshold = acute_threshold());

// Self-contained SVG documents; both axes in log-minutes for the scatter.
std::string svg_scatter(const std::vector<double>& true_ages,
                        const std::vector<double>& pred_ages);
std::string svg_roc(const RocCurve& roc);

} // namespace strokekit
