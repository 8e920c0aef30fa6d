#pragma once

#include <stdexcept>

namespace tracto {

// Error taxonomy shared across modules. The CLI maps invalid input/config
// errors to exit code 2 and numeric failures to exit code 3.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UnsupportedDatatypeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Sampling outside a volume's voxel bounding box. The tracker treats this
// as a stopping criterion rather than a failure.
struct OutOfBoundsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateStreamlineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyDatasetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyTractogramError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (loss, gradients).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace tracto
