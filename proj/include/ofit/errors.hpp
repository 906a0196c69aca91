#pragma once

#include <stdexcept>
#include <string>

namespace ofit {

// Malformed input files (JSON syntax, bad line format).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Well-formed input that violates a data invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent model, adapter or training configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Token sequence longer than the model's max_seq.
class LengthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values reaching the optimizer.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ofit
