#pragma once

#include <stdexcept>
#include <string>

namespace omoe {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad or inconsistent configuration (K > E, odd head dim, unknown keys...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Tensor shapes that do not fit together.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// NaN / non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Caller violated a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Token id outside the tokenizer range, or a malformed file.
class DecodeError : public Error {
public:
    using Error::Error;
};

/// File could not be read or written.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace omoe
