#pragma once

#include <stdexcept>
#include <string>

namespace migu {

// Error taxonomy used across the library. Everything derives from
// std::runtime_error so callers can catch broadly or by kind.

// Dimension disagreements (matmul inner dims, gradient vs parameter shape, ...).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Missing or stale cached state (forward cache absent, mask from an old step, ...).
struct StateError : std::runtime_error {
    explicit StateError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid user-supplied configuration.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// NaN/Inf where finite values are required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Caller violated an operation contract (e.g. comparing masks of unequal cardinality).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem and serialization failures.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace migu
