#pragma once

// Command-line front end: synth, train, propagate, evaluate, report.

#include <string_view>

namespace jrs {

inline constexpr std::string_view kToolVersion = "0.1.0";

// Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.
int run_cli(int argc, const char* const* argv);

}  // namespace jrs
