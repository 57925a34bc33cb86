#include "kvrelay/error.hpp"

namespace kvrelay {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownPosition: return "UnknownPosition";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::PositionOverlap: return "PositionOverlap";
        case ErrorCode::SinkTooLarge: return "SinkTooLarge";
        case ErrorCode::EmptyInput: return "EmptyInput";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::MissingColumn: return "MissingColumn";
        case ErrorCode::WrongGranularity: return "WrongGranularity";
        case ErrorCode::EmptyKeep: return "EmptyKeep";
        case ErrorCode::BudgetUnset: return "BudgetUnset";
        case ErrorCode::ChainEmpty: return "ChainEmpty";
        case ErrorCode::EmptyList: return "EmptyList";
        case ErrorCode::ZeroLength: return "ZeroLength";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::NumericalFailure: return "NumericalFailure";
    }
    return "Unknown";
}

}  // namespace kvrelay
