// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace lmort {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or API precondition (bad shapes, bad flags).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data, including binary file corruption.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A binary or text file does not follow its declared layout.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// NaN/Inf encountered during forward, backward or loss evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace lmort
