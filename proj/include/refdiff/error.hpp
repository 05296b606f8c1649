#pragma once

#include <stdexcept>
#include <string>

namespace refdiff {

// Error taxonomy. Each carries a human-readable message naming the offending
// shapes/keys/offsets; callers catch by type.
struct dimension_error : std::runtime_error {
    explicit dimension_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct index_error : std::runtime_error {
    explicit index_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct invalid_mask_error : std::runtime_error {
    explicit invalid_mask_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct validation_error : std::runtime_error {
    explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct corrupt_checkpoint_error : io_error {
    explicit corrupt_checkpoint_error(const std::string& msg) : io_error(msg) {}
};

}  // namespace refdiff
