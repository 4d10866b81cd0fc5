#pragma once

#include <stdexcept>
#include <string>

namespace cbav {

// Malformed or inconsistent configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad input data: meshes, poses, checkpoints, index files (CLI exit code 3).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite loss or failed factorization (CLI exit code 4).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log_info(const std::string& message);
void log_warn(const std::string& message);
void set_log_quiet(bool quiet);

}  // namespace cbav
