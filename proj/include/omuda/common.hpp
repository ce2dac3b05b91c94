#pragma once

#include <stdexcept>
#include <string>

namespace omuda {

// Configuration invariant violated (bad class partition, non-positive
// temperature reachable from a config file, ...). CLI maps this to exit 1.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// On-disk format violation. Messages carry the byte offset of the problem.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite loss or gradient during training. CLI maps this to exit 2.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed data fed to an operation (out-of-range label, empty dataset).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace omuda
