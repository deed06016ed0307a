#pragma once

#include <stdexcept>
#include <string>

namespace storyviz {

// Exit-code mapping used by the CLI: 2 usage, 3 data, 4 numeric failure.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Wrong checkpoint stage for an operation (stage-1 vs stage-2).
struct StageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace storyviz
