#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace magscope {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FileNotFound : public IoError {
 public:
  explicit FileNotFound(const std::string& path)
      : IoError("file not found: " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// A line of a text input could not be parsed. Line numbers are 1-based.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DuplicateSlideId : public Error {
 public:
  using Error::Error;
};

/// Requested magnification exceeds the slide's base objective power.
class UnavailableLevel : public Error {
 public:
  using Error::Error;
};

/// Extraction window does not fit inside the base image.
class OutOfBounds : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class MalformedModel : public Error {
 public:
  using Error::Error;
};

class WrongOutputDim : public Error {
 public:
  WrongOutputDim(std::size_t expected, std::size_t actual)
      : Error("model output has " + std::to_string(actual) + " dimensions, expected " +
              std::to_string(expected)),
        actual_(actual) {}
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::size_t actual_;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

}  // namespace magscope
