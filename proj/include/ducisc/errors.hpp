#pragma once

#include <stdexcept>
#include <string>

namespace ducisc {

// Root of every error raised by the library. The CLI maps ValidationError
// (and subclasses) to exit code 1 and everything else to exit code 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ValidationError : Error {
    using Error::Error;
};

struct ConfigError : ValidationError {
    using ValidationError::ValidationError;
};

struct ShapeMismatchError : ValidationError {
    using ValidationError::ValidationError;
};

// Label array that is not one-hot per voxel.
struct LabelInvariantError : ValidationError {
    using ValidationError::ValidationError;
};

struct IoError : Error {
    using Error::Error;
};

struct MissingFileError : IoError {
    using IoError::IoError;
};

struct FormatError : IoError {
    using IoError::IoError;
};

// Broken internal invariant (e.g. student/teacher parameter trees diverged).
struct InternalError : Error {
    using Error::Error;
};

struct NonFiniteLossError : Error {
    using Error::Error;
};

struct MetricUndefinedError : Error {
    using Error::Error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError(what);
}

inline int exit_code(const Error& e) { return dynamic_cast<const ValidationError*>(&e) ? 1 : 2; }

}  // namespace ducisc
