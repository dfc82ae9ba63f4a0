#pragma once

#include <stdexcept>
#include <string>

namespace relook {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Sequence longer than the model's positional table.
class CapacityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An injection script does not describe the response it is replayed against.
class ReplayError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A reduction over an empty selection (e.g. a fully masked loss).
class EmptyInputError : public Error {
 public:
  using Error::Error;
};

/// A metric whose denominator is zero on the given corpus.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace relook
