#pragma once

#include <stdexcept>
#include <string>

namespace mdrl {

/// Shape or dimension mismatch between tensors.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration value or inconsistent settings.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite value or other numeric failure during computation.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed on-disk data (bad magic, truncation, version mismatch).
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& msg, std::size_t byte_offset)
        : std::runtime_error(msg + " (at byte offset " + std::to_string(byte_offset) + ")"),
          offset_(byte_offset) {}

    std::size_t byte_offset() const { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace mdrl
