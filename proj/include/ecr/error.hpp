#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace ecr {

/// Base for every error raised by the toolkit. Carries the name of the module
/// that raised it so the CLI can report "module: cause".
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& message)
      : std::runtime_error(module + ": " + message), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

/// Malformed text input. `line` is 1-based; 0 when not applicable.
class ParseError : public Error {
 public:
  ParseError(std::string module, std::size_t line, const std::string& message)
      : Error(std::move(module),
              (line ? "line " + std::to_string(line) + ": " : std::string()) + message),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Well-formed input that violates a domain invariant.
class ValidationError : public Error {
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation (zero vector, B < 2, ...).
class DomainError : public Error {
  using Error::Error;
};

class DimensionError : public Error {
  using Error::Error;
};

/// Binary file problems: bad magic, unsupported version, truncation.
class FormatError : public Error {
  using Error::Error;
};

class ChecksumError : public Error {
  using Error::Error;
};

}  // namespace ecr
