#pragma once

#include <stdexcept>
#include <string>

namespace v2vbeam {

// Error classes map onto the CLI exit codes (see tools/): I/O -> 2,
// validation/dimension -> 3, numeric -> 4.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : ValidationError {
  using ValidationError::ValidationError;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace v2vbeam
