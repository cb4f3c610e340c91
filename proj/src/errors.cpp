#include "reflectkit/errors.hpp"

namespace reflectkit {

std::string_view to_string(ErrorCode code)
{
    switch (code) {
    case ErrorCode::InvalidProfile: return "invalid-profile";
    case ErrorCode::Parameter: return "parameter";
    case ErrorCode::SingularTrajectory: return "singular-trajectory";
    case ErrorCode::DegenerateFrequency: return "degenerate-frequency";
    case ErrorCode::TraceTooCoarse: return "trace-too-coarse";
    case ErrorCode::AmbiguousMultiplicity: return "ambiguous-multiplicity";
    case ErrorCode::WindowTooSmall: return "window-too-small";
    case ErrorCode::GeometryMismatch: return "geometry-mismatch";
    case ErrorCode::InsufficientData: return "insufficient-data";
    case ErrorCode::NonConvergence: return "non-convergence";
    case ErrorCode::Usage: return "usage";
    case ErrorCode::Io: return "io";
    }
    return "unknown";
}

} // namespace reflectkit
