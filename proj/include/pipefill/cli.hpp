// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

namespace pipefill::cli {

/// Exit codes: 0 success, 2 validation/usage error, 3 infeasible assignment.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

}  // namespace pipefill::cli
