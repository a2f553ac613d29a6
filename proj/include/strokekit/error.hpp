#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace strokekit {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Mismatched tensor extents; message names both shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Invalid or inconsistent configuration values.
class ConfigError : public Error {
public:
    using Error::Error;
};

// An API precondition was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

// Runtime input (slice, volume, flag value) does not fit the configured model.
class InputError : public Error {
public:
    using Error::Error;
};

// More labels than prediction slots.
class CapacityError : public Error {
public:
    using Error::Error;
};

// Synthetic data generation could not satisfy its constraints.
class GenerationError : public Error {
public:
    using Error::Error;
};

// Filesystem access failed outside the structured loaders (unopenable
// path, short write).
class IoError : public Error {
public:
    using Error::Error;
};

enum class LoadFailure { BadHeader, Truncated, ChecksumMismatch };

class LoadError : public Error {
public:
    LoadError(LoadFailure kind, const std::string& msg) : Error(msg), kind_(kind) {}
    LoadFailure kind() const { return kind_; }

private:
    LoadFailure kind_;
};

} // namespace strokekit

#define SK_THROW(ExType, msg)                                                            \
    do {                                                                                 \
        std::ostringstream sk_oss_;                                                      \
        sk_oss_ << msg;                                                                  \
        throw ExType(sk_oss_.str());                                                     \
    } while (0)

#define SK_CHECK(cond, ExType, msg)                                                      \
    do {                                                                                 \
        if (!(cond)) SK_THROW(ExType, msg);                                              \
    } while (0)
