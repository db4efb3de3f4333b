// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sefmap {

/// Invalid configuration, shape mismatch, or malformed file. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value produced during a forward or backward computation. Exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside an operation's mathematical domain (e.g. log of a non-positive value).
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the recorded computation (double backward, foreign handle, ...).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace sefmap
