#pragma once

#include <stdexcept>
#include <string>

namespace mmn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: malformed shapes, out-of-range indices, invalid configs or files.
// The CLI maps these to exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A NaN or infinity appeared during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace mmn
