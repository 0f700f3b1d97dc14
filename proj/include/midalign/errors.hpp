#pragma once

#include <stdexcept>
#include <string>

namespace midalign {

/// Invalid configuration: bad hyperparameters, unknown keys, inconsistent sets.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid runtime input: out-of-range token ids, empty targets, all-pad sequences.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite or undefined arithmetic (NaN loss, cosine of a zero vector).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or incompatible file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace midalign
