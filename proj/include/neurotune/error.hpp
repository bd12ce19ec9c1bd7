#pragma once

#include <stdexcept>
#include <string>

namespace neurotune {

// Process exit codes reused by every CLI entry point.
enum class ExitCode : int {
    ok = 0,
    config = 2,   // bad configuration / flags
    data = 3,     // data fails validation (shapes, NaN, empty)
    numeric = 4,  // numerical failure (divergence, non-SPD solve)
    io = 5,       // filesystem / format failure
};

struct Error : std::runtime_error {
    ExitCode code;
    Error(ExitCode c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(ExitCode::config, msg) {}
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error(ExitCode::data, msg) {}
};

struct NumericalError : Error {
    explicit NumericalError(const std::string& msg) : Error(ExitCode::numeric, msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ExitCode::io, msg) {}
};

// A subject whose ceiling-filtered tuning mask is empty cannot be tuned.
struct UntunableSubjectError : ValidationError {
    explicit UntunableSubjectError(const std::string& msg) : ValidationError(msg) {}
};

}  // namespace neurotune
