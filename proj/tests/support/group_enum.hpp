#pragma once

#include <string>
#include <vector>

#include "emma/transform.hpp"

namespace emma::verify {

struct GroupCheckResult {
    bool pass = false;
    int element_count = 0;
    std::string detail;  // first failure, empty on pass
};

// Enumerates the flip+rotation subgroup on n x n grids (optionally with all
// cyclic shifts) and verifies identity membership, closure under
// compose_transforms, exact inverses, and unitarity of every element via
// permutation_matrix_check.
GroupCheckResult exhaustive_group_check(int n, bool include_shifts);

}  // namespace emma::verify
