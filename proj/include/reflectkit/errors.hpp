#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace reflectkit {

enum class ErrorCode {
    InvalidProfile,
    Parameter,
    SingularTrajectory,
    DegenerateFrequency,
    TraceTooCoarse,
    AmbiguousMultiplicity,
    WindowTooSmall,
    GeometryMismatch,
    InsufficientData,
    NonConvergence,
    Usage,
    Io,
};

std::string_view to_string(ErrorCode code);

/// Base of every error raised by the toolkit. The code is stable and
/// machine-readable; the message is for humans.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& message)
{
    if (!condition)
        throw Error(code, message);
}

} // namespace reflectkit
