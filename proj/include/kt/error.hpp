#pragma once

#include <stdexcept>
#include <string>

namespace kt {

// Base of every error raised by the library. The CLI maps ConfigError to a
// distinct exit code; everything else is a runtime failure.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

// NaN/Inf in a buffer, non-finite gradient, diverged loss.
class NumericError : public Error {
public:
    using Error::Error;
};

// Softmax row with no valid entry, loss with no valid position, AUC on a
// single class, empty evaluation setting.
class DegenerateError : public Error {
public:
    using Error::Error;
};

class RangeError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : Error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace kt
