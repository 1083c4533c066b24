#pragma once

#include <stdexcept>
#include <string>

namespace displace {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// A caller violated a documented precondition.
class ContractError : public Error {
public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

/// Tensor extents do not conform to a primitive's shape rules.
class ShapeError : public ContractError {
public:
  explicit ShapeError(const std::string& msg) : ContractError(msg) {}
};

/// A numeric operation produced NaN or Inf.
class NumericFault : public Error {
public:
  explicit NumericFault(const std::string& msg) : Error(msg) {}
};

/// Malformed input data; message carries a line or byte offset.
class ParseError : public Error {
public:
  explicit ParseError(const std::string& msg) : Error(msg) {}
};

/// Filesystem or stream failure, corrupt checkpoint, manifest problems.
class IoError : public Error {
public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

/// Invalid or mismatched run/architecture configuration.
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

} // namespace displace
