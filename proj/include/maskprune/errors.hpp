#pragma once

#include <stdexcept>
#include <string>

namespace maskprune {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or model dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An index, count or argument lies outside its admissible range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed, or an optimizer diverged.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration file, unknown key, missing input file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A graph was used in a way its construction does not allow.
class GraphError : public Error {
 public:
  using Error::Error;
};

}  // namespace maskprune
