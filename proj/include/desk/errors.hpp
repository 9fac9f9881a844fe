#pragma once

#include <stdexcept>
#include <string>

namespace desk {

// Error taxonomy mirrors the CLI exit codes: config -> 2, data -> 3,
// non-convergence -> 4. Anything else is a plain Error (exit 1).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor/matrix shapes or a misuse of a typed value (e.g. a
// gram matrix in the wrong post-processing state).
struct DimensionError : Error {
    using Error::Error;
};

// Invalid configuration: bad layer stack, bad rates, bad counts.
struct ConfigError : Error {
    using Error::Error;
};

// File / format problems: bad magic, truncation, count mismatches.
struct DataError : Error {
    using Error::Error;
};

// An iterative solver hit its iteration cap before reaching tolerance.
struct ConvergenceError : Error {
    using Error::Error;
};

}  // namespace desk
