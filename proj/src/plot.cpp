#include "strokekit/plot.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "strokekit/error.hpp"

namespace strokekit {
namespace {

constexpr double kW = 640, kH = 480, kMargin = 64;

double sx(double t) { return kMargin + t * (kW - 2 * kMargin); } // t in [0,1]
double sy(double t) { return kH - kMargin - t * (kH - 2 * kMargin); }

std::string num(double v, int prec = 2) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(prec);
    os << v;
    return os.str();
}

void open_svg(std::ostringstream& os, const std::string& title) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
       << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
    os << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << kW / 2 << "\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\""
       << " font-size=\"16\">" << title << "</text>\n";
}

void axes(std::ostringstream& os, const std::string& xlabel, const std::string& ylabel,
          double x0, double x1, double y0, double y1, int ticks) {
    os << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(1) << "\" y2=\""
       << sy(0) << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(0) << "\" y2=\""
       << sy(1) << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= ticks; ++i) {
        const double t = static_cast<double>(i) / ticks;
        os << "<line x1=\"" << sx(t) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(t) << "\" y2=\""
           << sy(0) + 5 << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << sx(t) << "\" y=\"" << sy(0) + 20
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
           << num(x0 + t * (x1 - x0)) << "</text>\n";
        os << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(t) << "\" x2=\"" << sx(0) - 5
           << "\" y2=\"" << sy(t) << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << sx(0) - 8 << "\" y=\"" << sy(t) + 4
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
           << num(y0 + t * (y1 - y0)) << "</text>\n";
    }
    os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 16
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << xlabel
       << "</text>\n";
    os << "<text x=\"18\" y=\"" << kH / 2
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\""
       << " transform=\"rotate(-90 18 " << kH / 2 << ")\">" << ylabel << "</text>\n";
}

} // namespace

RocCurve roc_curve(const std::vector<double>& true_ages, const std::vector<double>& pred_ages,
                   double threshold) {
    SK_CHECK(true_ages.size() == pred_ages.size(), ShapeError,
             "roc_curve: " << true_ages.size() << " truths vs " << pred_ages.size()
                           << " predictions");
    long npos = 0, nneg = 0;
    for (double t : true_ages) (t <= threshold ? npos : nneg) += 1;
    SK_CHECK(npos > 0 && nneg > 0, InputError,
             "roc_curve needs both classes, got " << npos << " acute / " << nneg
                                                  << " non-acute");

    // ascending predicted age = descending acuteness score
    std::vector<size_t> order(true_ages.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return pred_ages[a] < pred_ages[b]; });

    RocCurve roc;
    roc.points.push_back({0.0, 0.0});
    long tp = 0, fp = 0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        // one step per tie group keeps the trapezoid rule pairwise-exact
        while (j < order.size() && pred_ages[order[j]] == pred_ages[order[i]]) {
            (true_ages[order[j]] <= threshold ? tp : fp) += 1;
            ++j;
        }
        roc.points.push_back({static_cast<double>(fp) / static_cast<double>(nneg),
                              static_cast<double>(tp) / static_cast<double>(npos)});
        i = j;
    }
    for (size_t k = 1; k < roc.points.size(); ++k) {
        const auto& a = roc.points[k - 1];
        const auto& b = roc.points[k];
        roc.auc += (b[0] - a[0]) * (a[1] + b[1]) / 2.0;
    }
    return roc;
}

std::string svg_scatter(const std::vector<double>& true_ages,
                        const std::vector<double>& pred_ages) {
    SK_CHECK(true_ages.size() == pred_ages.size(), ShapeError,
             "svg_scatter: " << true_ages.size() << " truths vs " << pred_ages.size()
                             << " predictions");
    SK_CHECK(!true_ages.empty(), InputError, "svg_scatter: no points");

    double lo = true_ages[0], hi = true_ages[0];
    for (double v : true_ages) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : pred_ages) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double pad = std::max(0.5, 0.05 * (hi - lo));
    lo -= pad;
    hi += pad;
    const auto to01 = [&](double v) { return (v - lo) / (hi - lo); };

    std::ostringstream os;
    open_svg(os, "Predicted vs actual lesion age");
    axes(os, "actual age (log-minutes)", "predicted age (log-minutes)", lo, hi, lo, hi, 5);
    os << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(1) << "\" y2=\""
       << sy(1) << "\" stroke=\"#bbbbbb\" stroke-dasharray=\"5,4\"/>\n";
    for (size_t i = 0; i < true_ages.size(); ++i)
        os << "<circle cx=\"" << sx(to01(true_ages[i])) << "\" cy=\"" << sy(to01(pred_ages[i]))
           << "\" r=\"3.5\" fill=\"#2166ac\" fill-opacity=\"0.7\"/>\n";
    os << "</svg>\n";
    return os.str();
}

std::string svg_roc(const RocCurve& roc) {
    SK_CHECK(roc.points.size() >= 2, InputError, "svg_roc: degenerate curve");
    std::ostringstream os;
    open_svg(os, "Acute (4.5 h) classification ROC");
    axes(os, "false positive rate", "true positive rate", 0, 1, 0, 1, 4);
    os << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(1) << "\" y2=\""
       << sy(1) << "\" stroke=\"#bbbbbb\" stroke-dasharray=\"5,4\"/>\n";
    os << "<polyline fill=\"none\" stroke=\"#b2182b\" stroke-width=\"2\" points=\"";
    for (const auto& p : roc.points) os << sx(p[0]) << "," << sy(p[1]) << " ";
    os << "\"/>\n";
    os << "<text x=\"" << sx(0.62) << "\" y=\"" << sy(0.08)
       << "\" font-family=\"sans-serif\" font-size=\"14\">AUC = " << num(roc.auc, 6)
       << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

} // namespace strokekit
