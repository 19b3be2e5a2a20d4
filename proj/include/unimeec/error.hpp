#pragma once

#include <stdexcept>
#include <string>

namespace unimeec {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed JSONL / JSON input. The message carries the line number.
struct ParseError : Error {
  using Error::Error;
};

// Well-formed input that violates a field contract (missing key, label out of range).
struct SchemaError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct NonFiniteError : Error {
  using Error::Error;
};

}  // namespace unimeec
