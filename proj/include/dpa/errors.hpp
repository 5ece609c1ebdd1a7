#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dpa {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// Raised when the dense Hessian would exceed the configured dimension cap.
class CapacityError : public Error {
public:
    using Error::Error;
};

class EvaluationError : public Error {
public:
    using Error::Error;
};

/// Non-finite value encountered. `index` is the tape operation index or the
/// sample index, depending on where the failure was detected.
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, std::size_t index)
        : Error(what), index_(index) {}

    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

// Persistence failures. Each corruption mode has its own type so callers and
// tests can tell them apart.
class FormatError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public FormatError {
public:
    BadMagicError(const std::string& what, std::size_t offset)
        : FormatError(what), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};

class CountMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};

class InvariantError : public FormatError {
public:
    using FormatError::FormatError;
};

}  // namespace dpa
