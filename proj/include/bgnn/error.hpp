#pragma once

#include <stdexcept>
#include <string>

namespace bgnn {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes or dimensions do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// An input violated a value precondition (non-finite, not in {-1,+1}, ...).
class ValueError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Dataset or text-file parse failure; the message carries file and line.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Model file could not be decoded.
class FormatError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};

namespace detail {
[[noreturn]] inline void throw_shape(const std::string& what) { throw ShapeError(what); }
[[noreturn]] inline void throw_value(const std::string& what) { throw ValueError(what); }
}  // namespace detail

}  // namespace bgnn
