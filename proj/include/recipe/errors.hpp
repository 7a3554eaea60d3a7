#pragma once

#include <stdexcept>
#include <string>

namespace recipe {

// Raised when caller-supplied data violates an operation's preconditions.
class InvalidInputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Raised when a computation produces non-finite values or is numerically
// undefined for the given data.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Raised when a pipeline configuration fails validation.
class InvalidConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace recipe
