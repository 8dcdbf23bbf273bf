#pragma once

#include <stdexcept>
#include <string>

namespace npm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Value outside an operation's mathematical domain (log of a non-positive
/// number, division by zero, probability outside [0, 1]).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or parameter combination.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents. Carries the byte offset (or line number for text
/// formats) where parsing failed.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Requested forecast window is not backed by contiguous records.
class WindowError : public Error {
public:
    using Error::Error;
};

/// A training step produced a non-finite loss or gradient.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace npm
