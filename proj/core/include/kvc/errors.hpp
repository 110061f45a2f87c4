#pragma once

#include <stdexcept>
#include <string>

namespace kvc {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation requires.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Argument outside its documented domain (ratio, window, index, ...).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A position id exceeded the configured context length.
class PositionOverflow : public Error {
public:
    using Error::Error;
};

/// Cache append violated the strictly-increasing position rule.
class NonMonotonicPosition : public Error {
public:
    using Error::Error;
};

/// Covariance handed to a sampler is not positive semidefinite.
class NotPositiveSemidefinite : public Error {
public:
    using Error::Error;
};

/// Weight container problems. Each failure mode has its own type so callers
/// and tests can tell them apart.
class FormatError : public Error {
public:
    using Error::Error;
};

class BadMagic : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncatedFile : public FormatError {
public:
    using FormatError::FormatError;
};

class MissingTensor : public FormatError {
public:
    using FormatError::FormatError;
};

class ExtentMismatch : public FormatError {
public:
    using FormatError::FormatError;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace kvc
