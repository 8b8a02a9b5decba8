#pragma once

#include <stdexcept>
#include <string>

namespace nbr {

// Error taxonomy shared across the toolkit. The C API maps each type to a
// stable error code, so new failure modes should reuse one of these rather
// than introduce ad-hoc exception classes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller-supplied value is outside its documented range.
class InvalidArgumentError : public Error {
 public:
  using Error::Error;
};

// File system failure: missing file, unreadable path, short write.
class IoError : public Error {
 public:
  using Error::Error;
};

// Input data that exists but does not conform to its format.
class ParseError : public Error {
 public:
  using Error::Error;
};

// A structural precondition was violated (empty list, shape mismatch,
// out-of-range id, checkpoint version conflict).
class StructuralError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or divergence during numeric work.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace nbr
