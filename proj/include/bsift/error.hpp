#pragma once

#include <stdexcept>
#include <string>

namespace bsift {

// Base for every error raised by the library. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk bundle, checkpoint or config. `field()` names the
// offending entry so the message can point the user at it.
class FormatError : public Error {
 public:
  FormatError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during an optimization loop.
class NumericFailure : public Error {
 public:
  NumericFailure(const std::string& where, long step)
      : Error(where + ": non-finite value at step " + std::to_string(step)),
        step_(step) {}

  long step() const noexcept { return step_; }

 private:
  long step_;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

}  // namespace detail
}  // namespace bsift
