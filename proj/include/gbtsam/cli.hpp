#pragma once

#include <iosfwd>

namespace gbtsam {

// Entry point of the `gbtsam` tool. Returns 0 on success, 1 on user error
// (bad config, missing files, aborted training), 2 on internal failure.
int run_cli(int argc, char const* const* argv, std::ostream& out, std::ostream& err);

} // namespace gbtsam
