#include "strokekit/age_fusion.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "strokekit/error.hpp"

namespace strokekit {

SplitNormal fit_split_normal(const std::array<double, 3>& q) {
    SplitNormal sn;
    sn.mu = q[1];
    sn.sigma1 = q[1] - q[0];
    sn.sigma2 = q[2] - q[1];
    sn.valid = sn.sigma1 > 0 && sn.sigma2 > 0;
    return sn;
}

double split_normal_pdf(const SplitNormal& sn, double x) {
    SK_CHECK(sn.valid, ContractError, "split_normal_pdf: invalid fit (sigma1 "
                                          << sn.sigma1 << ", sigma2 " << sn.sigma2 << ")");
    const double a = std::sqrt(2.0 / M_PI) / (sn.sigma1 + sn.sigma2);
    const double s = x < sn.mu ? sn.sigma1 : sn.sigma2;
    const double z = (x - sn.mu) / s;
    return a * std::exp(-0.5 * z * z);
}

namespace {

double mixture(const std::vector<SplitNormal>& sns, double x) {
    double s = 0;
    for (const auto& sn : sns) s += split_normal_pdf(sn, x);
    return s;
}

// Maximize within [a, b]; on equal probes keep the left interval so ties
// resolve toward smaller x.
double golden_max(const std::vector<SplitNormal>& sns, double a, double b) {
    const double gr = (std::sqrt(5.0) - 1) / 2;
    double c = b - gr * (b - a), d = a + gr * (b - a);
    double fc = mixture(sns, c), fd = mixture(sns, d);
    while (b - a > 1e-10) {
        if (fc >= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = mixture(sns, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = mixture(sns, d);
        }
    }
    return (a + b) / 2;
}

double argmax_mixture(const std::vector<SplitNormal>& sns) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    double s1 = 0, s2 = 0;
    for (const auto& sn : sns) {
        lo = std::min(lo, sn.mu);
        hi = std::max(hi, sn.mu);
        s1 = std::max(s1, sn.sigma1);
        s2 = std::max(s2, sn.sigma2);
    }
    lo -= 4 * s1;
    hi += 4 * s2;

    constexpr int n = 2048;
    const double step = (hi - lo) / (n - 1);
    int best = 0;
    double best_val = -1;
    for (int i = 0; i < n; ++i) {
        const double v = mixture(sns, lo + i * step);
        if (v > best_val) {
            best_val = v;
            best = i;
        }
    }
    const double a = lo + std::max(0, best - 1) * step;
    const double b = lo + std::min(n - 1, best + 1) * step;
    return golden_max(sns, a, b);
}

} // namespace

double fuse_age_estimates(const std::vector<std::array<double, 3>>& quantile_sets,
                          const FuseOptions& opt) {
    SK_CHECK(!quantile_sets.empty(), InputError, "fuse_age_estimates: no estimates");

    std::vector<SplitNormal> sns;
    sns.reserve(quantile_sets.size());
    bool any_invalid = false;
    for (const auto& q : quantile_sets) {
        const auto sn = fit_split_normal(q);
        any_invalid |= !sn.valid;
        if (sn.valid) sns.push_back(sn);
    }

    const bool fallback = opt.drop_invalid ? sns.empty() : any_invalid;
    if (fallback) {
        double s = 0;
        for (const auto& q : quantile_sets) s += q[1];
        return s / static_cast<double>(quantile_sets.size());
    }
    return argmax_mixture(sns);
}

std::vector<LesionInstance3D> connected_components_3d(const std::vector<SliceMasks>& slices,
                                                      int h, int w, int connectivity) {
    SK_CHECK(connectivity == 6 || connectivity == 26, ConfigError,
             "connected_components_3d: connectivity must be 6 or 26, got " << connectivity);
    SK_CHECK(h > 0 && w > 0, ShapeError, "connected_components_3d: bad extents " << h << "x" << w);
    const int ns = static_cast<int>(slices.size());
    const size_t plane = static_cast<size_t>(h) * static_cast<size_t>(w);
    for (const auto& sm : slices)
        for (const auto& qm : sm)
            SK_CHECK(qm.mask.size() == plane, ShapeError,
                     "connected_components_3d: mask size " << qm.mask.size() << " != " << plane);

    std::vector<std::uint8_t> fg(static_cast<size_t>(ns) * plane, 0);
    for (int s = 0; s < ns; ++s)
        for (const auto& qm : slices[static_cast<size_t>(s)])
            for (size_t i = 0; i < plane; ++i)
                if (qm.mask[i]) fg[static_cast<size_t>(s) * plane + i] = 1;

    std::vector<int32_t> parent(fg.size());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int32_t x) {
        while (parent[static_cast<size_t>(x)] != x) {
            parent[static_cast<size_t>(x)] = parent[static_cast<size_t>(parent[static_cast<size_t>(x)])];
            x = parent[static_cast<size_t>(x)];
        }
        return x;
    };
    auto unite = [&](int32_t a, int32_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[static_cast<size_t>(std::max(a, b))] = std::min(a, b);
    };

    // backward-pointing neighbor offsets only, so each pair is seen once
    std::vector<std::array<int, 3>> offs;
    for (int ds = -1; ds <= 0; ++ds)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (ds == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
                if (connectivity == 6 && std::abs(ds) + std::abs(dy) + std::abs(dx) != 1) continue;
                offs.push_back({ds, dy, dx});
            }

    auto vid = [&](int s, int y, int x) {
        return static_cast<int32_t>(static_cast<size_t>(s) * plane +
                                    static_cast<size_t>(y) * static_cast<size_t>(w) +
                                    static_cast<size_t>(x));
    };
    for (int s = 0; s < ns; ++s)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int32_t v = vid(s, y, x);
                if (!fg[static_cast<size_t>(v)]) continue;
                for (const auto& o : offs) {
                    const int s2 = s + o[0], y2 = y + o[1], x2 = x + o[2];
                    if (s2 < 0 || y2 < 0 || y2 >= h || x2 < 0 || x2 >= w) continue;
                    const int32_t u = vid(s2, y2, x2);
                    if (fg[static_cast<size_t>(u)]) unite(v, u);
                }
            }

    std::map<int32_t, int> root_to_idx;
    std::vector<LesionInstance3D> out;
    for (int s = 0; s < ns; ++s)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int32_t v = vid(s, y, x);
                if (!fg[static_cast<size_t>(v)]) continue;
                const int32_t r = find(v);
                auto [it, inserted] = root_to_idx.try_emplace(r, static_cast<int>(out.size()));
                if (inserted) out.emplace_back();
                out[static_cast<size_t>(it->second)].voxels.push_back({s, y, x});
            }

    // attribute each (slice, query) to every component its mask touches
    std::vector<std::map<std::pair<int, int>, std::array<double, 3>>> members(out.size());
    for (int s = 0; s < ns; ++s)
        for (const auto& qm : slices[static_cast<size_t>(s)])
            for (size_t i = 0; i < plane; ++i) {
                if (!qm.mask[i]) continue;
                const int32_t r = find(static_cast<int32_t>(static_cast<size_t>(s) * plane + i));
                members[static_cast<size_t>(root_to_idx.at(r))].try_emplace({s, qm.query},
                                                                            qm.quantiles);
            }
    for (size_t i = 0; i < out.size(); ++i) {
        for (const auto& [key, q] : members[i]) {
            out[i].members.push_back(key);
            out[i].quantiles.push_back(q);
        }
    }
    return out;
}

void fuse_instance_ages(std::vector<LesionInstance3D>& instances, const FuseOptions& opt) {
    for (auto& inst : instances) inst.fused_age = fuse_age_estimates(inst.quantiles, opt);
}

std::string export_instances_text(const std::vector<LesionInstance3D>& instances) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(6);
    for (size_t i = 0; i < instances.size(); ++i) {
        const auto& inst = instances[i];
        os << "instance " << i << " voxels " << inst.voxels.size() << " age_log " << inst.fused_age
           << " age_min " << std::exp(inst.fused_age) << " members";
        for (const auto& [s, q] : inst.members) os << " (" << s << "," << q << ")";
        os << "\n";
    }
    return os.str();
}

} // namespace strokekit
