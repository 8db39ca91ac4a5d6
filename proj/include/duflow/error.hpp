#pragma once

#include <stdexcept>
#include <string>

namespace duflow {

enum class ErrorCode {
    ShapeMismatch,
    InvalidShape,
    InvalidArgument,
    MaskEmpty,
    BackwardTwice,
    IndivisibleDims,
    BadMagic,
    Truncated,
    BadDims,
    Io,
    Config,
    NonFinite,
};

inline const char *error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::InvalidShape: return "InvalidShape";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::MaskEmpty: return "MaskEmpty";
        case ErrorCode::BackwardTwice: return "BackwardTwice";
        case ErrorCode::IndivisibleDims: return "IndivisibleDims";
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::Truncated: return "Truncated";
        case ErrorCode::BadDims: return "BadDims";
        case ErrorCode::Io: return "Io";
        case ErrorCode::Config: return "Config";
        case ErrorCode::NonFinite: return "NonFinite";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
   public:
    Error(ErrorCode code, const std::string &what)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

   private:
    ErrorCode code_;
};

}  // namespace duflow
