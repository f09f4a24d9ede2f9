#pragma once

#include <stdexcept>
#include <string>

namespace sphere_attn {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A computation produced or received a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent or out-of-domain configuration (odd head count, L odd, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed SPC1 / SPW1 file or I/O failure.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Table index outside [0, L).
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Input larger than an operation's guard.
class SizeError : public Error {
 public:
  using Error::Error;
};

}  // namespace sphere_attn
