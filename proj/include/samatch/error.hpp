#pragma once

#include <stdexcept>
#include <string>

namespace samatch {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Array shapes that must agree do not.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value, unknown key, or inconsistent settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File could not be read/written or had unexpected content.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Serialized data written by an incompatible schema version.
class VersionError : public Error {
 public:
  using Error::Error;
};

/// A segmenter received a prompt kind it cannot consume.
class UnsupportedPromptError : public Error {
 public:
  using Error::Error;
};

}  // namespace samatch
