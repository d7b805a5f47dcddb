#pragma once

#include <stdexcept>
#include <string>

namespace iriskit {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/size disagreement between tensors or masks.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration (model plan, split ratios, empty grids, ...).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Operation called in the wrong order (e.g. backward without a forward graph).
class StateError : public Error {
public:
    explicit StateError(const std::string& msg) : Error(msg) {}
};

// Bad argument value (out-of-range threshold, empty mask, zero vector, ...).
class ValueError : public Error {
public:
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

// File and format failures.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Weight-container failures carry a code so callers can tell the cases apart.
class ContainerError : public IoError {
public:
    enum class Code {
        BadMagic,
        BadVersion,
        BadCrc,
        Truncated,
        ShapeMismatch,
        UnknownTensor,
        MissingTensor,
    };

    ContainerError(Code code, const std::string& msg) : IoError(msg), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

// Manifest loading failures, with the offending record when known.
class ManifestError : public Error {
public:
    explicit ManifestError(const std::string& msg) : Error(msg) {}
};

} // namespace iriskit
