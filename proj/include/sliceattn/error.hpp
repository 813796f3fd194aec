#pragma once

#include <stdexcept>
#include <string>

namespace sliceattn {

// Base of every error the library throws. The CLI maps each subclass to an
// exit code (see tools/sliceattn.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or out-of-range axes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// API misuse: backward on a non-scalar, reuse of a released tape, ...
class ContractError : public Error {
 public:
  using Error::Error;
};

// Bad user-provided data (empty deck, key slice out of range, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// Generator specification that cannot be satisfied.
class SpecError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in gradients or losses, degenerate normalization, divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace sliceattn
