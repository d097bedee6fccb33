#pragma once

#include <stdexcept>
#include <string>

namespace cvt {

// Bad input data: malformed dumps, invariant violations, unusable training sets.
// The CLI maps this to exit code 2.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid arguments or configuration. The CLI maps this to exit code 1.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class SectionMissing : public DataError {
public:
    explicit SectionMissing(const std::string& section)
        : DataError("section missing: " + section) {}
};

} // namespace cvt
