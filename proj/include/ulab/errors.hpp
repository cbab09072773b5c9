#pragma once

#include <stdexcept>
#include <string>

namespace ulab {

// Error categories map to process exit codes in the CLI:
// ConfigError -> 2, PrereqError -> 3, NumericError -> 4, anything else -> 1.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct PrereqError : std::runtime_error {
    explicit PrereqError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimError : std::runtime_error {
    explicit DimError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SingularError : std::runtime_error {
    explicit SingularError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CorruptionError : std::runtime_error {
    explicit CorruptionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct JudgeParseError : std::runtime_error {
    explicit JudgeParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct JudgeHttpError : std::runtime_error {
    explicit JudgeHttpError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ulab
