#pragma once

#include <stdexcept>
#include <string>

namespace focusdpo {

enum class ErrorKind {
    shape,
    range,
    config,
    data,
    numeric,
    usage,
    io,
};

const char* to_string(ErrorKind kind);

/// Base exception for everything the library throws on purpose. The kind
/// decides the CLI exit code.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error(ErrorKind::shape, m) {}
};
struct RangeError : Error {
    explicit RangeError(const std::string& m) : Error(ErrorKind::range, m) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};
struct DataError : Error {
    explicit DataError(const std::string& m) : Error(ErrorKind::data, m) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error(ErrorKind::numeric, m) {}
};
struct UsageError : Error {
    explicit UsageError(const std::string& m) : Error(ErrorKind::usage, m) {}
};
struct IoError : Error {
    explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};

}  // namespace focusdpo
