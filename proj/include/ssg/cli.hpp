#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ssg::cli {

/// Runs one subcommand. Returns 0 on success, 1 on validation, format or
/// configuration errors and 2 on I/O errors; diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

}  // namespace ssg::cli
