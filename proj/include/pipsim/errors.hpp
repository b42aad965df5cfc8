#pragma once

#include <stdexcept>
#include <string>

namespace pipsim {

// Root of every error thrown by the library. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
  public:
    using Error::Error;
};

class NumericError : public Error {
  public:
    using Error::Error;
};

class DomainError : public Error {
  public:
    using Error::Error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

class FormatError : public Error {
  public:
    using Error::Error;
};

class CorruptionError : public Error {
  public:
    using Error::Error;
};

class IoError : public Error {
  public:
    using Error::Error;
};

class GenerationError : public Error {
  public:
    using Error::Error;
};

}  // namespace pipsim
