#pragma once

#include <stdexcept>
#include <string>

namespace nowcast {

enum class ErrorCode {
    BadMagic,
    BadVersion,
    TruncatedPayload,
    PayloadMismatch,
    IoFailure,
    InvalidArgument,
    OutOfRange,
    ShapeMismatch,
    ParseError,
    InsufficientData,
    DegenerateData,
    InfeasibleConfig,
    EmptyInput,
};

const char* error_code_name(ErrorCode code);

/// Exception carrying a machine-checkable error code next to the message.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) fail(code, message);
}

}  // namespace nowcast
