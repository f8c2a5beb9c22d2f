#pragma once

#include <stdexcept>
#include <string>

namespace gka {

/// Tensor extents do not line up for the requested operation.
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// A scalar or configuration parameter is outside its valid domain.
class ParameterError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Bad user data: token ids out of range, malformed files, unknown presets.
class InputError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// NaN/Inf encountered, or a mask left a row with nothing to normalize.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace gka
