#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace mvdiff {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr double kPi = 3.14159265358979323846;

inline double wrap_angle(double psi) {
    const double two_pi = 2.0 * kPi;
    double w = std::fmod(psi, two_pi);
    if (w < 0) w += two_pi;
    return w;
}

// Error taxonomy mirrors the CLI exit codes: usage 2, I/O 3, numeric 4.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Contract violations (shape mismatches, bad arguments).
struct InvalidArgument : std::runtime_error {
    explicit InvalidArgument(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InvalidArgument(msg);
}

}  // namespace mvdiff
