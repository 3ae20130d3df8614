#pragma once

#include <stdexcept>
#include <string>

namespace pafu {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A precondition on arguments was violated (tau <= 0, duplicate names, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class UnsupportedKernelError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf showed up where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad magic, unsupported version, unsupported image layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Truncated or otherwise inconsistent file payload.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

}  // namespace pafu
