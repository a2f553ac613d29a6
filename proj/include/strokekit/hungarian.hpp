#pragma once

#include <vector>

namespace strokekit {

// Exact minimum-cost assignment for an n x m cost matrix with n <= m.
// Returns for each row the column it is assigned to (all distinct).
// Throws ShapeError on an empty or ragged matrix, ContractError if n > m.
std::vector<int> hungarian_solve(const std::vector<std::vector<double>>& cost);

} // namespace strokekit
