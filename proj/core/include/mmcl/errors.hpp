#pragma once

#include <stdexcept>
#include <string>

namespace mmcl {

/// Bad shapes, bad config values, unknown config keys.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// API misuse: wrong call order, stepping a frozen parameter, duplicate begin.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed input data (unknown token ids, truncated blobs).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// NaN/Inf in a forward value, failed factorization, diverged training.
class NumericFault : public std::runtime_error {
 public:
  explicit NumericFault(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mmcl
