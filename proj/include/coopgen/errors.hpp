#pragma once

#include <stdexcept>
#include <string>

namespace coopgen {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/graph shape or binding mismatch.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf detected in checked mode.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Langevin state exceeded the divergence bound.
struct DivergenceError : Error {
    explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

// Bad run configuration or schema violation.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// File read/write failures.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace coopgen
