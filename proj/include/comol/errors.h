// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by every module.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace comol {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A scalar argument is outside its legal range (k > N, empty expert list, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Iterative numerical routine failed to converge.
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, double residual)
        : Error(what), residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

/// Layer configuration is internally inconsistent.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Caller broke an API contract (stale trace, mismatched optimizer state).
class ContractError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    IoError(const std::string& what, std::string path)
        : Error(what + ": " + path), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

/// Checkpoint manifest and blob disagree.
class IntegrityError : public Error {
public:
    using Error::Error;
};

class VersionError : public Error {
public:
    using Error::Error;
};

/// Loss became NaN/Inf during training.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, std::size_t step)
        : Error(what), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

}  // namespace comol
