#pragma once

#include <stdexcept>
#include <string>

namespace docml {

// Error taxonomy maps onto CLI exit codes: config=1, data=2, numeric=3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace docml
