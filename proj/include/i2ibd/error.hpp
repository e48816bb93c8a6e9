#pragma once

#include <stdexcept>
#include <string>

namespace i2ibd {

// Every failure the library reports derives from Error so callers (the CLI in
// particular) can map the concrete type onto a distinct exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class DecodeError : public IoError {
 public:
  using IoError::IoError;
};

class MissingArtifactError : public IoError {
 public:
  using IoError::IoError;
};

/// Stored content does not match its recorded sha256.
class HashMismatchError : public IoError {
 public:
  using IoError::IoError;
};

class ArchMismatchError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ProvenanceError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace i2ibd
