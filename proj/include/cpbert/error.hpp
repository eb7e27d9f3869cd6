#pragma once

#include <stdexcept>
#include <string>

namespace cpbert {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file (SMF, text score, shard, checkpoint, config).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A value violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite activations, losses or gradients.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace cpbert
