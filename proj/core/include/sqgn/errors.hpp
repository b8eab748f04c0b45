#pragma once

#include <stdexcept>
#include <string>

namespace sqgn {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Shape or length mismatch between operands.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// Violated precondition or API contract (non-scalar grad output, negative lambda, ...).
class ContractError : public Error {
public:
  using Error::Error;
};

/// NaN/Inf encountered; message names the producing operation or iteration.
class NumericError : public Error {
public:
  using Error::Error;
};

/// Use of a Var whose tape generation was cleared (intermediates discarded).
class TapeError : public Error {
public:
  using Error::Error;
};

/// Invalid layer stack (incompatible shapes, indivisible pooling, zero fan).
class ArchitectureError : public Error {
public:
  using Error::Error;
};

/// Malformed input file (bad IDX magic, truncated payload).
class FormatError : public Error {
public:
  using Error::Error;
};

/// Invalid or inconsistent experiment configuration.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Filesystem failure, message carries the path.
class IoError : public Error {
public:
  using Error::Error;
};

/// Restart policy exhausted: every attempt stayed at chance-level accuracy.
class StuckRunError : public Error {
public:
  using Error::Error;
};

} // namespace sqgn
