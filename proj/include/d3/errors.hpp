#pragma once

#include <stdexcept>

namespace d3 {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between tensors.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Out-of-range index, e.g. a class label outside [0, K).
class IndexError : public Error {
public:
    using Error::Error;
};

/// Violated operation contract (stale cache, empty selector, empty dataset, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Malformed file (IDX, checkpoint, CSV) or I/O failure.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Invalid experiment configuration.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Training or defense produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace d3
