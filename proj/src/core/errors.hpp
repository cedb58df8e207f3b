#pragma once

#include <stdexcept>
#include <string>

namespace latdyn {

// Error categories map 1:1 onto CLI exit codes (config=2, data=3, numeric=4).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape mismatches are programming/config errors; kept separate so op
// construction can name the op and the offending shapes.
struct ShapeError : ConfigError {
  explicit ShapeError(const std::string& msg) : ConfigError(msg) {}
};

}  // namespace latdyn
