#pragma once

#include <map>
#include <string>
#include <vector>

namespace dfq::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kFormat = 2, kContract = 3, kNumerical = 4 };

// Flat "key = value" lines; '#' starts a comment. Duplicate keys: last wins.
std::map<std::string, std::string> parse_config_text(const std::string& text);

// Entry point shared by the executable and the tests.
int run(const std::vector<std::string>& args);

}  // namespace dfq::cli
