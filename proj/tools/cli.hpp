#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace bnerf::cli {

inline constexpr int kExitSuccess = 0;
inline constexpr int kExitFailure = 1;  // tolerance or assertion failure
inline constexpr int kExitUsage = 2;

/// Runs one subcommand; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Git blob object id ("blob <size>\0" + bytes) as lowercase hex SHA-1.
std::string git_blob_sha1(const std::string& bytes);

}  // namespace bnerf::cli
