#pragma once

#include <stdexcept>
#include <string>

namespace pemf {

// Invalid tensor geometry or violated op precondition.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN/Inf surfaced by an op output, a gradient, or a loss value.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Unreadable or malformed dataset input.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid run configuration (config file or command line).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace pemf
