#pragma once

#include <stdexcept>
#include <string>

namespace gdla {

// Base class for all library errors. Subclasses identify the failure class
// so callers (and the CLI exit-code mapping) can tell validation problems
// from I/O problems.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };    // operand shape mismatch
struct ContractError : Error { using Error::Error; };     // precondition violated
struct ConfigError : Error { using Error::Error; };       // invalid configuration
struct IndexError : Error { using Error::Error; };        // out-of-range label or index
struct ParseError : Error { using Error::Error; };        // malformed text input
struct NonFiniteError : Error { using Error::Error; };    // NaN/Inf escaped an operation
struct DeterminismError : Error { using Error::Error; };  // same inputs, different outputs
struct IoError : Error { using Error::Error; };           // filesystem or serialization failure
struct TrainingError : Error { using Error::Error; };     // aborted training run

}  // namespace gdla
