#pragma once

#include <stdexcept>
#include <string>

namespace scatsep {

/// Base class for every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI error JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Lengths, window sizes or octave counts that do not fit together.
class SizingError : public Error {
 public:
  explicit SizingError(const std::string& message) : Error("sizing", message) {}
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& message) : Error("invalid_argument", message) {}
};

/// Malformed, truncated or version-mismatched files.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& message) : Error("format", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

class DigestError : public Error {
 public:
  explicit DigestError(const std::string& message) : Error("digest", message) {}
};

/// Non-finite values produced during a computation.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& message) : Error("numerical", message) {}
};

/// Misuse of a differentiation tape (unbound leaf, backward before forward...).
class TapeError : public Error {
 public:
  explicit TapeError(const std::string& message) : Error("tape", message) {}
};

}  // namespace scatsep
