#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kclflow {

enum class ErrorKind {
    // validation
    InvalidGrid,
    InvalidArgument,
    SlackAdjacent,
    WouldIsland,
    SyntaxError,
    MissingTable,
    NoSlack,
    MultipleSlack,
    DanglingReference,
    ZeroImpedance,
    IsolatedBus,
    DimMismatch,
    ShapeMismatch,
    StaleTape,
    EmptySplit,
    TopologyMismatch,
    // numerical
    Diverged,
    SingularJacobian,
    TooManyDivergences,
    NonFiniteLoss,
    // io
    Io,
    FixtureMissing,
    InsufficientDisk,
};

std::string_view to_string(ErrorKind kind);

/// Process exit code associated with an error kind: 2 validation, 3 numerical, 4 I/O.
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message);

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace kclflow
