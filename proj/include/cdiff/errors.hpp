#pragma once

#include <stdexcept>
#include <string>

namespace cdiff {

// Input failed a documented precondition (shape, range, mode, ...).
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// File system or format problem while reading/writing artifacts.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Run configuration is inconsistent or conflicts with a checkpoint.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InfeasibleDensity : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CoverageUnreachable : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace cdiff
