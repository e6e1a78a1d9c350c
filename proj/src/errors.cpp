// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/errors.hpp"

namespace adaptwin {

std::string_view category_name(ErrorCategory c) noexcept {
    switch (c) {
        case ErrorCategory::Shape: return "shape";
        case ErrorCategory::Numerical: return "numerical";
        case ErrorCategory::Rank: return "rank";
        case ErrorCategory::Plan: return "plan";
        case ErrorCategory::Input: return "input";
        case ErrorCategory::Training: return "training";
        case ErrorCategory::Assembly: return "assembly";
        case ErrorCategory::Format: return "format";
        case ErrorCategory::Config: return "config";
        case ErrorCategory::Io: return "io";
    }
    return "unknown";
}

std::string_view fault_name(FormatFault f) noexcept {
    switch (f) {
        case FormatFault::BadMagic: return "bad magic";
        case FormatFault::UnsupportedVersion: return "unsupported version";
        case FormatFault::Truncated: return "truncated";
        case FormatFault::LengthMismatch: return "length mismatch";
        case FormatFault::UnknownDtype: return "unknown dtype";
        case FormatFault::HashMismatch: return "hash mismatch";
        case FormatFault::BadHeader: return "bad header";
        case FormatFault::Schema: return "schema";
    }
    return "unknown";
}

}  // namespace adaptwin
