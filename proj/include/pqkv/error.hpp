#pragma once

// Error taxonomy shared across the library. Everything derives from
// pqkv::Error so callers can catch one type at the CLI boundary.

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pqkv {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file contents: bad magic, unknown version or dtype code,
// inconsistent dimensions, bad JSON schema.
struct FormatError : Error {
  using Error::Error;
};

// A read or write ended short of the declared payload length.
struct LengthError : Error {
  using Error::Error;
};

// Shape mismatch between tensors, or a shape invalid for the operation.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf input, invalid bit width, out-of-range code, or any other
// numeric precondition violation.
struct NumericError : Error {
  using Error::Error;
};

// The cache cannot admit a token: every non-retained segment already sits
// at the floor bit width and the ledger still exceeds the budget.
struct CapacityError : Error {
  explicit CapacityError(const std::string& msg, std::uint64_t step = 0)
      : Error(msg), step(step) {}
  std::uint64_t step;
};

// The allocation instance admits no plan under the given budget.
// min_feasible_bytes reports the cheapest possible total so the caller
// can see how far off the budget is.
struct InfeasibleError : Error {
  InfeasibleError(const std::string& msg, std::uint64_t min_feasible_bytes)
      : Error(msg), min_feasible_bytes(min_feasible_bytes) {}
  std::uint64_t min_feasible_bytes;
};

}  // namespace pqkv
