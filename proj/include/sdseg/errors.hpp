#pragma once

#include <stdexcept>
#include <string>

namespace sdseg {

/// Tensor/layer shape contract violation.
class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Bad key/value in a run configuration file. Carries the offending line when known.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what, int line = 0)
        : std::runtime_error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what),
          line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

/// Malformed or truncated data file (dataset container, checkpoint, sidecar).
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// Dataset unusable for the requested operation (e.g. a class is absent).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite loss or parameters during optimization.
class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace sdseg
