#pragma once

#include <stdexcept>
#include <string>

namespace dmc {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree (wrong axis length, channel mismatch, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Valid tensors, impossible geometry (zero-size conv output, indivisible
// pooling extent, patch not divisible by the network's downsampling).
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Bad build-time configuration (unsupported rank, inconsistent channel plan).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad runtime data (label id out of range, negative spacing).
class DataError : public Error {
 public:
  using Error::Error;
};

// File parsing / serialization failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// API misuse (backward on a non-scalar node, grad read before backward).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace dmc
