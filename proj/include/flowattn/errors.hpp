#pragma once

#include <stdexcept>

namespace flowattn {

// Operand dimensions do not line up. The message names the offending shapes.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Math domain violation: division by zero, log of a non-positive value,
// a capacity that should be strictly positive, and the like.
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A documented precondition was broken by the caller.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss or gradient.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace flowattn
