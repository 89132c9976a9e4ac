#pragma once

#include <stdexcept>
#include <string>

namespace bt2 {

/// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree (matrix sizes, vector lengths, parameter counts).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input lies outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the gradient graph (unbound inputs, non-scalar loss, ...).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values appeared during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// A vector collapsed to zero where a direction was required.
class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent record sets passed to an evaluator.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A metric was requested that the inputs cannot support.
class MetricError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file. Carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace bt2
