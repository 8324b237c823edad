#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fntk {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke a precondition (shape mismatch, non-finite input, bad option).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// An iterative or factorization routine produced NaN/Inf or a singular factor.
class NumericBreakdown : public Error {
 public:
  NumericBreakdown(const std::string& what, std::ptrdiff_t iteration = -1)
      : Error(what), iteration_(iteration) {}
  std::ptrdiff_t iteration() const noexcept { return iteration_; }

 private:
  std::ptrdiff_t iteration_;
};

// A similarity between Jacobians with an all-zero argument.
class UndefinedSimilarity : public NumericBreakdown {
 public:
  explicit UndefinedSimilarity(const std::string& what) : NumericBreakdown(what) {}
};

// A dense assembly would exceed the configured memory cap.
class ResourceError : public Error {
 public:
  using Error::Error;
};

// A GP fit failed to reach the required residual.
class FitError : public Error {
 public:
  FitError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

// Training produced a non-finite loss.
class TrainingDivergence : public Error {
 public:
  TrainingDivergence(const std::string& what, std::size_t epoch)
      : Error(what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

// Cached state no longer matches the objects it was built from
// (stale posterior, checkpoint/architecture fingerprint mismatch).
class ConsistencyError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

// Malformed or unreadable input file.
class InputError : public Error {
 public:
  using Error::Error;
};

}  // namespace fntk
