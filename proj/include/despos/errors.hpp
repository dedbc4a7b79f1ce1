#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace despos {

/// Bad input data or a violated data invariant. Maps to CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Generator parameters that cannot produce a valid world.
class SizingError : public DataError {
 public:
  using DataError::DataError;
};

/// Malformed file content; `record` is a 1-based line or record number.
class ParseError : public DataError {
 public:
  ParseError(const std::string& file, std::size_t record, const std::string& what)
      : DataError(file + ":" + std::to_string(record) + ": " + what), file_(file), record_(record) {}

  const std::string& file() const { return file_; }
  std::size_t record() const { return record_; }

 private:
  std::string file_;
  std::size_t record_;
};

}  // namespace despos
