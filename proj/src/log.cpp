#include "dfq/log.hpp"

#include <atomic>
#include <iostream>

namespace dfq {

namespace {
std::atomic<Verbosity> g_verbosity{Verbosity::Normal};
}

void set_verbosity(Verbosity v) { g_verbosity = v; }
Verbosity verbosity() { return g_verbosity; }

void log_warning(const std::string& message) {
  if (g_verbosity != Verbosity::Quiet) std::cerr << "warning: " << message << '\n';
}

void log_info(const std::string& message) {
  if (g_verbosity == Verbosity::Verbose) std::cerr << message << '\n';
}

}  // namespace dfq
