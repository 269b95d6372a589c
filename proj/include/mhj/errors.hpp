#pragma once

#include <stdexcept>
#include <string>

namespace mhj {

// Common base so callers can catch everything from this library at once.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error { using Error::Error; };
struct NonFiniteResult : Error { using Error::Error; };
struct ZeroVector : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct TokenOutOfRange : Error { using Error::Error; };
struct EmptyInput : Error { using Error::Error; };
struct SchemaError : Error { using Error::Error; };

} // namespace mhj
