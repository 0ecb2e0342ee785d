#pragma once

#include <stdexcept>
#include <string>

namespace cardiq {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed input that fails a structural contract (bad magic, bad grammar).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Structurally valid input using a feature we deliberately do not support.
class UnsupportedDatatypeError : public Error {
public:
    using Error::Error;
};

/// Input ends before the declared payload does.
class TruncationError : public Error {
public:
    using Error::Error;
};

/// Text input with a line that does not match the expected grammar.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Two related inputs disagree (dimension or spacing mismatch).
class ConsistencyError : public Error {
public:
    using Error::Error;
};

/// An argument violates a stated precondition or invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A required file or directory entry is missing.
class NotFoundError : public Error {
public:
    using Error::Error;
};

/// Too few observations for the requested statistic.
class InsufficientDataError : public Error {
public:
    using Error::Error;
};

/// Input is formally valid but degenerate for the requested operation.
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// Filesystem/stream failure.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace cardiq
