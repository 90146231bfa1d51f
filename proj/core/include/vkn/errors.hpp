#pragma once

#include <stdexcept>
#include <string>

namespace vkn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, missing or inconsistent data on disk or in memory (CLI exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

/// On-disk format version we do not understand.
class VersionError : public DataError {
 public:
  using DataError::DataError;
};

/// A forward pass met NaN or Inf activations. Training reports it as divergence.
class NonFiniteError : public DimensionError {
 public:
  using DimensionError::DimensionError;
};

/// Training produced a non-finite loss (CLI exit code 4).
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace vkn
