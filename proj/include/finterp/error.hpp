// SPDX-License-Identifier: Apache-2.0
//
// Exception types shared by every finterp module.

#pragma once

#include <stdexcept>
#include <string>

namespace finterp {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A file could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

/// A caller violated a precondition (bad index, bad configuration, ...).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// An input file was readable but its content is malformed.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace finterp
