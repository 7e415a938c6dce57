#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace prefpipe {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// A record, manifest, or argument violates a documented contract.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(what) {}
};

// Bad configuration detected before any work is done.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what) {}
};

// A line-oriented input file could not be parsed. line() is 1-based,
// 0 when the failure is not tied to a specific line.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line, std::string field = {})
        : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
          line_(line),
          field_(std::move(field)) {}

    std::size_t line() const { return line_; }
    const std::string& field() const { return field_; }

private:
    std::size_t line_;
    std::string field_;
};

// A remote call failed after exhausting retries, or the failure budget
// of a batch run was exceeded.
class TransportError : public Error {
public:
    explicit TransportError(const std::string& what) : Error(what) {}
};

}  // namespace prefpipe
