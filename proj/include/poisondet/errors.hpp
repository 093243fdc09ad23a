#pragma once
#include <cstddef>
#include <stdexcept>
#include <string>

namespace poisondet {

// Malformed input bytes (bad JSON, bad PNG signature, ...).
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg, std::size_t byte_offset = 0)
        : std::runtime_error(msg), byte_offset(byte_offset) {}
    std::size_t byte_offset;
};

// Well-formed input that violates a documented invariant
// (dangling ids, score out of range, unknown category, ...).
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / OS level failures (missing file, unwritable path).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace poisondet
