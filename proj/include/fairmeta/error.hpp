#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fairmeta {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  DimensionError(const std::string& what, std::size_t expected, std::size_t given)
      : Error(what + ": expected dimension " + std::to_string(expected) + ", given " +
              std::to_string(given)),
        expected_(expected),
        given_(given) {}

  std::size_t expected() const { return expected_; }
  std::size_t given() const { return given_; }

 private:
  std::size_t expected_;
  std::size_t given_;
};

/// A metric needs both protected groups and one of them is empty.
class EmptyGroupError : public Error {
 public:
  EmptyGroupError(const std::string& what, bool protected_group)
      : Error(what + ": " + (protected_group ? "protected" : "unprotected") +
              " group is empty"),
        protected_group_(protected_group) {}

  bool protected_group() const { return protected_group_; }

 private:
  bool protected_group_;
};

/// Malformed input file; carries the 1-based line number when known (0 = unknown).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

}  // namespace fairmeta
