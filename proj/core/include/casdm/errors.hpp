#pragma once

#include <stdexcept>
#include <string>

namespace casdm {

// Bad user-facing configuration (unknown key, bad value, hash mismatch on resume).
// CLI maps this (and std::invalid_argument) to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem trouble: missing file, unwritable path, short read. Exit code 3.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Structurally broken on-disk artifact (bad magic, dim/payload mismatch,
// unknown manifest entry). A subtype of I/O failure, same exit code 3.
struct FormatError : IoError {
    explicit FormatError(const std::string& msg) : IoError(msg) {}
};

// Numerical breakdown: non-finite loss, non-PSD covariance beyond tolerance.
// Exit code 4.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace casdm
