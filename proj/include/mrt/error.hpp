#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mrt {

// Base for every domain error raised by the library. The CLI maps these to
// exit code 1; anything else is a usage error or a bug.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A named invariant of a domain type does not hold.
class InvariantError : public Error {
 public:
  InvariantError(std::string invariant, const std::string& detail)
      : Error(invariant + ": " + detail), invariant_(std::move(invariant)) {}
  const std::string& invariant() const noexcept { return invariant_; }

 private:
  std::string invariant_;
};

// Malformed text input, positioned at a 1-based line.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& message)
      : Error("line " + std::to_string(line) + ": " + message), line_(line), detail_(message) {}
  ParseError(const std::string& source, std::size_t line, const std::string& message)
      : Error(source + ": line " + std::to_string(line) + ": " + message), line_(line), detail_(message) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::size_t line_;
  std::string detail_;
};

}  // namespace mrt
