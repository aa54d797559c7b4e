#pragma once

#include <stdexcept>
#include <string>

namespace lorap {

/// Bad arguments: out-of-range ranks, shape mismatches, malformed flag values.
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent input data (tensor files, configs, token files).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A requested compression budget that cannot be realized.
class InfeasibleError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// SVD backend did not converge.
class DecompositionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace lorap
