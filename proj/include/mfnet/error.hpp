#pragma once

#include <stdexcept>
#include <string>

namespace mfnet {

// Base class for every error raised by the library. The CLI maps the
// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents do not agree with what an operation requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Spatial geometry is invalid (output extent < 1, odd extent, ...).
class GeometryError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Bad user-facing configuration (ModelSpec, RunConfig, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// An input value is out of its documented range.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Malformed text input; the message carries the source and line number.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Checkpoint or raster file cannot be decoded.
class LoadError : public Error {
 public:
  using Error::Error;
};

// A memory or compute budget cannot be satisfied.
class ResourceError : public Error {
 public:
  using Error::Error;
};

// A function under numerical evaluation produced a non-finite value.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

}  // namespace mfnet
