#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bruno {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConstraintViolation : Error { using Error::Error; };
struct NonFiniteError : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };
struct RangeError : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct InsufficientData : Error { using Error::Error; };
struct BadMagic : Error { using Error::Error; };
struct TruncatedFile : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };
struct VersionMismatch : Error { using Error::Error; };
struct CorruptFile : Error { using Error::Error; };

// Thrown when a training loss goes NaN/inf; carries the losses recorded up
// to the failing iteration so callers can still dump the trace.
struct Diverged : Error {
  std::vector<double> trace;
  Diverged(const std::string& msg, std::vector<double> partial_trace)
      : Error(msg), trace(std::move(partial_trace)) {}
};

}  // namespace bruno
