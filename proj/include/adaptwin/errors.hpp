// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace adaptwin {

/// Coarse error category; the CLI maps each one to a distinct exit code.
enum class ErrorCategory {
    Shape = 2,
    Numerical = 3,
    Rank = 4,
    Plan = 5,
    Input = 6,
    Training = 7,
    Assembly = 8,
    Format = 9,
    Config = 10,
    Io = 11,
};

std::string_view category_name(ErrorCategory c) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

#define ADAPTWIN_DEFINE_ERROR(Name, Cat)                                                   \
    class Name : public Error {                                                            \
    public:                                                                                \
        explicit Name(const std::string& what) : Error(ErrorCategory::Cat, what) {}       \
    }

ADAPTWIN_DEFINE_ERROR(ShapeError, Shape);
ADAPTWIN_DEFINE_ERROR(NumericalError, Numerical);
ADAPTWIN_DEFINE_ERROR(RankError, Rank);
ADAPTWIN_DEFINE_ERROR(PlanError, Plan);
ADAPTWIN_DEFINE_ERROR(InputError, Input);
ADAPTWIN_DEFINE_ERROR(TrainingError, Training);
ADAPTWIN_DEFINE_ERROR(AssemblyError, Assembly);
ADAPTWIN_DEFINE_ERROR(ConfigError, Config);
ADAPTWIN_DEFINE_ERROR(IoError, Io);

#undef ADAPTWIN_DEFINE_ERROR

/// Structural problems found while decoding a container file.
enum class FormatFault {
    BadMagic,
    UnsupportedVersion,
    Truncated,
    LengthMismatch,
    UnknownDtype,
    HashMismatch,
    BadHeader,
    Schema,
};

std::string_view fault_name(FormatFault f) noexcept;

class FormatError : public Error {
public:
    FormatError(FormatFault fault, const std::string& what)
        : Error(ErrorCategory::Format, std::string(fault_name(fault)) + ": " + what), fault_(fault) {}

    FormatFault fault() const noexcept { return fault_; }

private:
    FormatFault fault_;
};

}  // namespace adaptwin
