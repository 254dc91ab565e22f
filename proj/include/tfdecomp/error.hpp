#pragma once

#include <stdexcept>
#include <string>

namespace tfdecomp {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An index (token id, layer, head, position) is out of bounds.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A requested sublayer cut or range lies outside what was computed.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Model or run configuration is inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity showed up in an intermediate result.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// The input makes the requested quantity undefined (zero norm, zero variance, one label).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class InsufficientSamplesError : public Error {
 public:
  using Error::Error;
};

/// No reference data exists for the requested group (e.g. an unseen lemma).
class CoverageError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint, corpus or config file could not be read.
class LoadError : public Error {
 public:
  using Error::Error;
};

}  // namespace tfdecomp
