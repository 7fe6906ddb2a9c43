#pragma once

#include <ostream>

namespace dknn {

/// Entry point of the `dknn` tool. Returns 0 on success, 1 on a runtime
/// failure, 2 on a usage or configuration error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dknn
