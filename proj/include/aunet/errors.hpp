#pragma once

#include <stdexcept>
#include <string>

namespace aunet {

// Shape disagreement between tensor operands.
struct DimensionError : std::invalid_argument {
    explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid static configuration (sizes, hyperparameters, file headers).
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// API misuse (non-scalar loss, missing mask logits, empty inputs).
struct UsageError : std::invalid_argument {
    explicit UsageError(const std::string& msg) : std::invalid_argument(msg) {}
};

}  // namespace aunet
