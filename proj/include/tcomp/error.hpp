// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace tcomp {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree (matmul inner dims, elementwise shapes, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Two models or layers are not structurally compatible.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition on arguments was violated (odd layer count,
/// rank out of range, degenerate merge weights, ...).
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Token id or sequence length outside the model's vocabulary/positions.
class InputError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced, non-convergence, or a non-finite training loss.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint container or data file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace tcomp
