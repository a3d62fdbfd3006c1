#pragma once

#include <stdexcept>
#include <string>

namespace onebox {

// Base class for every error thrown by the library. The CLI maps the
// subclasses onto exit codes (config 2, data 3, numerical 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A parameter or argument outside its admissible domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Explicit-Euler stability guard Q'·dt/V < 1 violated.
class StepSizeError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// Malformed measurement/schedule/sample files.
class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Inconsistent dimensions between data, latent path and parameters.
class StructuralError : public Error {
 public:
  using Error::Error;
};

// Non-finite log joint at chain start.
class StartupError : public Error {
 public:
  using Error::Error;
};

}  // namespace onebox
