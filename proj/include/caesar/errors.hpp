#pragma once

#include <stdexcept>
#include <string>

namespace caesar {

/// Precondition violated by a caller-supplied value.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A rotation that is not orthonormal (or has det -1) beyond tolerance.
class InvalidPoseError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

/// Malformed file contents; the message names the offending field.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values in a forward pass or loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operation invoked in a state that does not allow it.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bad or unknown configuration keys.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace caesar
