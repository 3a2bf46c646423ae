#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace duet {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ZeroVectorError : public Error {
public:
    using Error::Error;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class EmptyPoolError : public Error {
public:
    using Error::Error;
};

class TooLongError : public Error {
public:
    using Error::Error;
};

class UnknownTokenError : public Error {
public:
    using Error::Error;
};

class InvalidBoxError : public Error {
public:
    using Error::Error;
};

class InvalidConfidenceError : public Error {
public:
    using Error::Error;
};

class NotNormalizedError : public Error {
public:
    using Error::Error;
};

class BadNegativeCountError : public Error {
public:
    using Error::Error;
};

class BatchTooSmallError : public Error {
public:
    using Error::Error;
};

class BadIndexError : public Error {
public:
    using Error::Error;
};

class MissingComponentError : public Error {
public:
    using Error::Error;
};

class TooFewSamplesError : public Error {
public:
    using Error::Error;
};

class DesyncError : public Error {
public:
    using Error::Error;
};

class VocabTooSmallError : public Error {
public:
    using Error::Error;
};

class NoSlotError : public Error {
public:
    using Error::Error;
};

/// Malformed input line in a JSON-lines corpus file. Carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& msg)
        : Error("line " + std::to_string(line) + ": " + msg), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// Structurally valid input that violates a corpus invariant. Carries the 1-based line number.
class ValidationError : public Error {
public:
    ValidationError(std::size_t line, const std::string& msg)
        : Error("line " + std::to_string(line) + ": " + msg), line_(line) {}
    explicit ValidationError(const std::string& msg) : Error(msg), line_(0) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

class NonFiniteGradError : public Error {
public:
    using Error::Error;
};

class MissingCheckpointError : public Error {
public:
    using Error::Error;
};

class BadLabelError : public Error {
public:
    using Error::Error;
};

class BadCandidateCountError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace duet
