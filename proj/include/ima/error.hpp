#pragma once

#include <stdexcept>
#include <string>

namespace ima {

enum class ErrorKind {
  ShapeMismatch,   // tensor/vector extents disagree
  Contract,        // precondition on values or call order violated
  Config,          // inconsistent configuration
  State,           // object not in a usable state (e.g. uninitialized stats)
  Parameter,       // argument outside its legal range
  Index,           // id/index out of range
  Io,              // file system failure
  BadMagic,        // wrong file magic
  Truncated,       // payload shorter than the header claims
  Overflow,        // header dimensions exceed sane bounds
  Incompatible,    // versions/configs do not match
  NotFound,        // named item missing
  Empty,           // empty input where at least one element is required
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace ima
