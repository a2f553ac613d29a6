#include "strokekit/hungarian.hpp"

#include <cmath>
#include <limits>

#include "strokekit/error.hpp"

namespace strokekit {

// Potential-based Hungarian algorithm, O(n^2 m). Indices are 1-based
// internally; column 0 is the virtual unmatched column.
std::vector<int> hungarian_solve(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    SK_CHECK(n > 0, ShapeError, "hungarian_solve: empty cost matrix");
    const int m = static_cast<int>(cost[0].size());
    for (const auto& row : cost) {
        SK_CHECK(static_cast<int>(row.size()) == m, ShapeError,
                 "hungarian_solve: ragged cost matrix");
        // the augmenting search breaks down on NaN comparisons
        for (double c : row)
            SK_CHECK(std::isfinite(c), InputError, "hungarian_solve: non-finite cost");
    }
    SK_CHECK(n <= m, ContractError,
             "hungarian_solve: rows " << n << " exceed cols " << m);

    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0), v(m + 1, 0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = -1;
            double delta = inf;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

} // namespace strokekit
