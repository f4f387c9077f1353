#include "kclflow/error.hpp"

namespace kclflow {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidGrid: return "InvalidGrid";
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::SlackAdjacent: return "SlackAdjacent";
        case ErrorKind::WouldIsland: return "WouldIsland";
        case ErrorKind::SyntaxError: return "SyntaxError";
        case ErrorKind::MissingTable: return "MissingTable";
        case ErrorKind::NoSlack: return "NoSlack";
        case ErrorKind::MultipleSlack: return "MultipleSlack";
        case ErrorKind::DanglingReference: return "DanglingReference";
        case ErrorKind::ZeroImpedance: return "ZeroImpedance";
        case ErrorKind::IsolatedBus: return "IsolatedBus";
        case ErrorKind::DimMismatch: return "DimMismatch";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::StaleTape: return "StaleTape";
        case ErrorKind::EmptySplit: return "EmptySplit";
        case ErrorKind::TopologyMismatch: return "TopologyMismatch";
        case ErrorKind::Diverged: return "Diverged";
        case ErrorKind::SingularJacobian: return "SingularJacobian";
        case ErrorKind::TooManyDivergences: return "TooManyDivergences";
        case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorKind::Io: return "Io";
        case ErrorKind::FixtureMissing: return "FixtureMissing";
        case ErrorKind::InsufficientDisk: return "InsufficientDisk";
    }
    return "Unknown";
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Diverged:
        case ErrorKind::SingularJacobian:
        case ErrorKind::TooManyDivergences:
        case ErrorKind::NonFiniteLoss:
            return 3;
        case ErrorKind::Io:
        case ErrorKind::FixtureMissing:
        case ErrorKind::InsufficientDisk:
            return 4;
        default:
            return 2;
    }
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

}  // namespace kclflow
