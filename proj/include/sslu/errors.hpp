// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sslu {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "dimension"; }
};

// API used out of order (backward twice, push after close, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "contract"; }
};

// Label sequence cannot be aligned to a lattice of the given length.
class InfeasibleError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "infeasible"; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
  const char* kind() const noexcept override { return "divergence"; }
};

// Malformed or inconsistent data: corpora, records, configs.
class DataError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "data"; }
};

// Bad magic, unsupported version or truncated serialized file.
class FormatError : public DataError {
 public:
  using DataError::DataError;
  const char* kind() const noexcept override { return "format"; }
};

}  // namespace sslu
