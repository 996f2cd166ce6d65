#pragma once

#include <stdexcept>
#include <string>

namespace mfip {

// Bad input: dimension mismatch, invalid matrix, out-of-range parameter.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Valid input that the requested operation does not handle.
class Unsupported : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A numerical routine reached a state that should be impossible.
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A simulation produced a non-finite value. Carries the last time at which
// the whole ensemble was still finite.
class BlowUp : public std::runtime_error {
 public:
  BlowUp(const std::string& what, double last_finite_time)
      : std::runtime_error(what), last_finite_time_(last_finite_time) {}
  double last_finite_time() const { return last_finite_time_; }

 private:
  double last_finite_time_;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace mfip
