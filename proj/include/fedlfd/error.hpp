#pragma once

#include <stdexcept>
#include <string>

namespace fedlfd {

// Base of every error the library throws. The CLI maps ConfigError to exit
// code 2 and NumericError to exit code 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller broke a precondition (empty batch, length mismatch, lr <= 0, ...).
class UsageError : public Error {
public:
    using Error::Error;
};

class ShapeError : public UsageError {
public:
    using UsageError::UsageError;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ConflictError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace fedlfd
