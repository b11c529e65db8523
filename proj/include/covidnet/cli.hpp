#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace covidnet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomainError = 1;
inline constexpr int kExitUsage = 2;

/// Runs one subcommand (analyze, build-manifest, synth-data, train, eval,
/// explain). `args` excludes the program name. Returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace covidnet
