#pragma once

#include <stdexcept>
#include <string>

namespace dynalm {

// Base for all library errors. The CLI maps the subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration, bad arguments, missing checkpoint arrays (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, divergence (exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

// File system failures (exit code 4).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dynalm
