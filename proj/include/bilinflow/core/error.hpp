/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/core/error.hpp
 *
 * Copyright 2026 The bilinflow authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#ifndef BILINFLOW_CORE_ERROR_HPP
#define BILINFLOW_CORE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace bilinflow {

/**
 * Base class of every exception thrown by the library.
 */
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file. The message carries the line number when known.
class ParseError : public Error
{
public:
    using Error::Error;
};

/// File system failure (missing file, unwritable path, short read).
class IoError : public Error
{
public:
    using Error::Error;
};

/// Arguments that violate an operation's preconditions.
class InvalidArgument : public Error
{
public:
    using Error::Error;
};

/// A numerical computation produced a non-finite or degenerate result.
class NumericalError : public Error
{
public:
    using Error::Error;
};

namespace detail {

inline void require(bool condition, const std::string& message)
{
    if (!condition)
    {
        throw InvalidArgument(message);
    }
}

} // namespace detail
} // namespace bilinflow

#endif /* BILINFLOW_CORE_ERROR_HPP */
