#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kvrelay {

enum class ErrorCode {
    UnknownPosition,
    ShapeMismatch,
    PositionOverlap,
    SinkTooLarge,
    EmptyInput,
    DimensionMismatch,
    MissingColumn,
    WrongGranularity,
    EmptyKeep,
    BudgetUnset,
    ChainEmpty,
    EmptyList,
    ZeroLength,
    InvalidArgument,
    ConfigError,
    IoError,
    NumericalFailure,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace kvrelay
