// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace legoflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the accepted domain (negative variance, bad label, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by a forward or backward pass.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Misuse of a stateful object, e.g. running backward twice on one tape.
class StateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint, path file or other serialized artifact.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace legoflow
