#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tiltlab {

// Input that could not be parsed (CSV rows, config files, bad encodings).
// line() is 1-based and refers to the physical line where the record began;
// it is 0 when no line position applies.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::string message, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + message
                                : std::move(message)),
        line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// A checkpoint or artifact whose recorded digests no longer match its bytes.
class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A configuration value that is missing, ill-typed, or out of range.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tiltlab
