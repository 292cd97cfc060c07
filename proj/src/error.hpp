// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace can {

enum class ErrorKind {
    invalid_argument,
    io,
    format,
    numeric,
    internal,
};

/// The one exception type the library throws. The C API maps `kind` onto
/// its status codes; everything inside the core just throws.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool cond, ErrorKind kind, const std::string& message) {
    if (!cond) {
        fail(kind, message);
    }
}

} // namespace can
