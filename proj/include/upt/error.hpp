#pragma once

#include <stdexcept>
#include <string>

namespace upt {

// Bad input: malformed files, failed validation, violated preconditions.
// The CLI maps these to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure while doing otherwise valid work (divergence, I/O write failure).
// The CLI maps these to exit code 1.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace upt
