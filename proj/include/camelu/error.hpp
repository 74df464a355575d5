#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace camelu {

enum class ErrorKind {
  dimension,
  index,
  contract,
  config,
  io,
  lookup,
  numeric,
  fit,
};

std::string_view error_kind_name(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Raised when every start of a curve fit fails to converge.
class FitError : public Error {
 public:
  FitError(const std::string& message, double best_residual)
      : Error(ErrorKind::fit, message), best_residual_(best_residual) {}

  double best_residual() const noexcept { return best_residual_; }

 private:
  double best_residual_;
};

// Raised on a non-finite training loss; carries the offending episode's
// provenance (JSON text) so the episode can be replayed.
class NumericError : public Error {
 public:
  NumericError(const std::string& message, std::string provenance)
      : Error(ErrorKind::numeric, message), provenance_(std::move(provenance)) {}

  const std::string& provenance() const noexcept { return provenance_; }

 private:
  std::string provenance_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace camelu
