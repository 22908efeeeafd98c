#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace vita {

inline constexpr const char* kToolVersion = "0.1.0";

/// Exit codes: 0 success, 1 contract or format error, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

/// Worker thread cap from VITA_THREADS (default 1).
int thread_cap();

/// Where the run manifest for an output path is written.
std::filesystem::path manifest_path(const std::filesystem::path& output);

}  // namespace vita
