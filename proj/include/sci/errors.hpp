#ifndef SCI_ERRORS_HPP
#define SCI_ERRORS_HPP

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sci {

// Process exit codes shared by every CLI subcommand.
enum class ExitCode : int { ok = 0, usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& kind, const std::string& what)
      : std::runtime_error(what), code_(code), kind_(kind) {}
  ExitCode code() const noexcept { return code_; }
  const std::string& kind() const noexcept { return kind_; }

 private:
  ExitCode code_;
  std::string kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ExitCode::data, "dimension", what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ExitCode::numeric, "numeric", what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ExitCode::usage, "usage", what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ExitCode::data, "format", what) {}
};

std::string shape_str(std::span<const std::int64_t> shape);

}  // namespace sci

#endif
