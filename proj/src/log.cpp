#include "cbav/errors.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace cbav {
namespace {
std::atomic<bool> g_quiet{false};
std::mutex g_mutex;
}  // namespace

void set_log_quiet(bool quiet) { g_quiet = quiet; }

void log_info(const std::string& message) {
  if (g_quiet) return;
  std::lock_guard<std::mutex> lock(g_mutex);
  std::cerr << "[cbav] " << message << '\n';
}

void log_warn(const std::string& message) {
  std::lock_guard<std::mutex> lock(g_mutex);
  std::cerr << "[cbav] warning: " << message << '\n';
}

}  // namespace cbav
