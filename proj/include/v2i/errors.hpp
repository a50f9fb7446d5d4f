#pragma once

#include <stdexcept>
#include <string>

namespace v2i {

// Invalid configuration values. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class LookupError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    IoError(const std::string& path, const std::string& what)
        : std::runtime_error(path + ": " + what), path_(path) {}

    const std::string& path() const { return path_; }

private:
    std::string path_;
};

// Raised when a loss becomes NaN/Inf during training.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace v2i
