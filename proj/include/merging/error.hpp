#pragma once

#include <stdexcept>
#include <string>

namespace merging {

// Stable error classes, also used verbatim by the CLI's single-line
// machine-parseable diagnostics.
enum class ErrorClass { Config, Io, Numeric, Threshold };

inline const char* error_class_name(ErrorClass c) {
    switch (c) {
        case ErrorClass::Config: return "CONFIG";
        case ErrorClass::Io: return "IO";
        case ErrorClass::Numeric: return "NUMERIC";
        case ErrorClass::Threshold: return "THRESHOLD";
    }
    return "UNKNOWN";
}

class Error : public std::runtime_error {
public:
    Error(ErrorClass cls, const std::string& msg)
        : std::runtime_error(msg), cls_(cls) {}
    ErrorClass error_class() const noexcept { return cls_; }

private:
    ErrorClass cls_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(ErrorClass::Config, msg) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ErrorClass::Io, msg) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(ErrorClass::Numeric, msg) {}
};
struct ThresholdError : Error {
    explicit ThresholdError(const std::string& msg) : Error(ErrorClass::Threshold, msg) {}
};

}  // namespace merging
