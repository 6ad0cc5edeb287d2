#pragma once

#include <stdexcept>

namespace klite {

// Bad or inconsistent input data: files, schemas, vocabularies.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf reached a tensor op, or a training step diverged.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Contract violation inside the tensor core (shape mismatch, bad target index).
struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace klite
