// SPDX-License-Identifier: Apache-2.0
//
// The cwamsn command line: generate, train, embed, eval-gg and eval-cg.
#pragma once

#include <ostream>

namespace cwamsn::cli {

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

/// Runs one command. Reports go to `out`; the resolved config, progress and
/// diagnostics go to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cwamsn::cli
