#pragma once

#include <stdexcept>
#include <string>

namespace dprobe {

// Base for every error the toolkit raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: config, paths, arguments. Maps to CLI exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Bundle sentences do not line up with the companion treebank.
class AlignmentError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace dprobe
