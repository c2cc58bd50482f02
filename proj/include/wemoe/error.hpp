#pragma once

#include <stdexcept>
#include <string>

namespace wemoe {

// Base of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes disagree.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A caller broke an operation's precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// Non-finite value produced while finite checks are on.
class NumericalError : public Error {
public:
    using Error::Error;
};

// Two parameter trees disagree in names or shapes. `key()` names the first divergent tensor.
class StructureError : public Error {
public:
    StructureError(std::string key, const std::string & what)
        : Error(what), key_(std::move(key)) {}
    const std::string & key() const noexcept { return key_; }

private:
    std::string key_;
};

// Bad input data (datasets, configs, command-line values).
class DataError : public Error {
public:
    using Error::Error;
};

} // namespace wemoe
