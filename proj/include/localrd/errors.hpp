#pragma once

#include <stdexcept>
#include <string>

namespace localrd {

// Failure classes map one-to-one onto CLI exit codes:
// config -> 2, data -> 3, numeric -> 4.
enum class ErrorKind { config, data, numeric };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message)
        : std::runtime_error(std::move(message)), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// Invalid flags, malformed requests, impossible settings.
class ConfigError : public Error {
public:
    explicit ConfigError(std::string message) : Error(ErrorKind::config, std::move(message)) {}
};

// Malformed or insufficient input data (schema violations, bad rows,
// misaligned locality sets, too little age support).
class DataError : public Error {
public:
    explicit DataError(std::string message) : Error(ErrorKind::data, std::move(message)) {}
};

// Well-formed inputs on which the requested computation breaks down
// (singular fits, degenerate denominators, division by zero).
class NumericError : public Error {
public:
    explicit NumericError(std::string message) : Error(ErrorKind::numeric, std::move(message)) {}
};

} // namespace localrd
