#pragma once

#include <stdexcept>
#include <string>

namespace mabn {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or layout violations: ShapeMismatch, ChannelMismatch, NotScalar,
/// LayoutMismatch, NonSquare, HeadMismatch.
class ShapeError : public Error {
  using Error::Error;
};

/// NaN/Inf detected at an op boundary, or training divergence.
class NonFiniteError : public Error {
  using Error::Error;
};

/// Illegal call for the current BN mode or adaptation scope:
/// ModeViolation, BatchTooSmall, ScopeViolation.
class ModeError : public Error {
  using Error::Error;
};

/// Empty or insufficient data: EmptySupport, EmptyMetaBatch, EmptyTestSet,
/// TooFewDomains, EmptyBatch, InsufficientSamples, DataExhausted, InvalidSpec.
class DataError : public Error {
  using Error::Error;
};

/// Corrupt, truncated or unwritable files.
class IoError : public Error {
  using Error::Error;
};

/// Invalid or unknown configuration.
class ConfigError : public Error {
  using Error::Error;
};

}  // namespace mabn
