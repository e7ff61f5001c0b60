#pragma once

#include <stdexcept>
#include <string>

namespace mfno {

/// Failure categories; the CLI maps each onto a process exit code.
enum class ErrorKind { config = 2, data = 3, numeric = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

  const char* code_name() const noexcept {
    switch (kind_) {
      case ErrorKind::config: return "config_error";
      case ErrorKind::data: return "data_error";
      case ErrorKind::numeric: return "numeric_error";
    }
    return "error";
  }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

}  // namespace mfno
