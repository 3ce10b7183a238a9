#pragma once

#include <stdexcept>
#include <string>

namespace bm {

// Exit-code classes used by the CLI: config 1, runtime abort 2, I/O 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user input: invalid configuration, missing input paths, contract misuse.
struct ConfigError : Error {
    using Error::Error;
};

// Shape/extent mismatches between tensors or layers.
struct DimensionError : ConfigError {
    using ConfigError::ConfigError;
};

// API preconditions violated (non-scalar backward root, label out of range, ...).
struct ContractError : ConfigError {
    using ConfigError::ConfigError;
};

// A run became numerically invalid (non-finite loss) and was aborted.
struct RuntimeAbort : Error {
    using Error::Error;
};

// Filesystem-level failures: unreadable/unwritable paths.
struct IoError : Error {
    using Error::Error;
};

// Structurally invalid file contents: wrong magic, truncated blobs.
struct FormatError : IoError {
    using IoError::IoError;
};

} // namespace bm
