#pragma once

#include <stdexcept>
#include <string>

namespace toxitrace {

// Precondition broken by the caller (bad shape, index out of range, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN or overflow surfaced while evaluating or differentiating a graph.
class NumericFault : public std::runtime_error {
 public:
  NumericFault(std::string op, const std::string& what)
      : std::runtime_error("numeric fault in " + op + ": " + what), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

// Input record or file failed validation.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TruncationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace toxitrace

namespace toxitrace::bicse {

// Scan thresholds need at least two scores.
class UndefinedThresholds : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace toxitrace::bicse
