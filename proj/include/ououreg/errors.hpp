#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ououreg {

/// Malformed or inconsistent user input (files, labels, parameter values).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Newick syntax error; `position()` is the byte offset where parsing stopped.
class ParseError : public InputError {
 public:
  ParseError(const std::string& what, std::size_t position)
      : InputError(what + " at position " + std::to_string(position)),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// Tree fails a structural requirement of the model (e.g. not ultrametric).
class TreeError : public InputError {
 public:
  using InputError::InputError;
};

/// Linear algebra or objective evaluation broke down.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ououreg
