#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace ntk {

// Error taxonomy. The CLI maps these onto exit codes:
//   ValidationError/ConfigError -> 2, IoError (and subtypes) -> 3,
//   DomainError/NumericError -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Unrecognized container magic, unsupported version, unparseable header.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

// Structurally valid header but payload does not match it.
class CorruptionError : public IoError {
 public:
  using IoError::IoError;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class NumericError : public DomainError {
 public:
  using DomainError::DomainError;
};

// Storage precision is 32-bit float; arithmetic elsewhere runs in 64-bit and
// rounds through this exactly once.
inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

inline std::string format_double(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

static_assert(std::endian::native == std::endian::little,
              "container codec assumes a little-endian host");

}  // namespace ntk
