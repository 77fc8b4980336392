#pragma once

#include <string>

namespace dfq {

enum class Verbosity { Quiet = 0, Normal = 1, Verbose = 2 };

void set_verbosity(Verbosity v);
Verbosity verbosity();

// Diagnostics go to stderr; warnings print unless Quiet, info only when Verbose.
void log_warning(const std::string& message);
void log_info(const std::string& message);

}  // namespace dfq
