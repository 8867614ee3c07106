#pragma once

#include <stdexcept>
#include <string>

namespace fedmae {

// Base of everything the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments, malformed configs, violated preconditions.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// lambda = 0 with a rank-deficient Gram matrix.
class SingularMatrixError : public Error {
 public:
  using Error::Error;
};

// Loss or objective stopped being finite.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

}  // namespace fedmae
