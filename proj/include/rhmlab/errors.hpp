#pragma once

#include <stdexcept>
#include <string>

namespace rhmlab {

/// Invalid user-supplied parameters or configuration. The CLI maps this to
/// exit code 2; everything else derived from std::runtime_error maps to 3.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParameterError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class CapExceeded : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class NotACodeword : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rhmlab
