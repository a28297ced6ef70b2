#pragma once

#include <stdexcept>
#include <string>

namespace fpcrf {

// Error taxonomy mirrors the CLI exit codes: config 2, I/O 3, numeric 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fpcrf
