#pragma once

#include <stdexcept>
#include <string>

namespace setgen {

/// Error categories; values double as CLI exit codes.
enum class ErrorKind : int {
  usage = 2,
  data = 3,
  numerical = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Tensor shape or geometry mismatch. `dimension` names the offending axis
/// ("channels", "spatial[1]", ...).
class ShapeError : public Error {
 public:
  ShapeError(std::string op, std::string dimension, const std::string& detail)
      : Error(ErrorKind::data, op + ": shape mismatch in " + dimension + ": " + detail),
        op_(std::move(op)),
        dimension_(std::move(dimension)) {}

  const std::string& op() const noexcept { return op_; }
  const std::string& dimension() const noexcept { return dimension_; }

 private:
  std::string op_;
  std::string dimension_;
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

}  // namespace setgen
