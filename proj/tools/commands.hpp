#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace mmcl::cli {

/// Runs the CLI against already-split arguments (no program name). Returns the
/// process exit code: 0 success, 1 runtime failure, 2 usage/config error.
/// Informational output goes to `out`, diagnostics to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

inline int dispatch(const std::vector<std::string>& args) {
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace mmcl::cli
