#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ssum {

using u16 = std::uint16_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;
using Token = std::int32_t;

// Domain errors. Each failure mode named in a module contract gets its own
// type so callers (and tests) can tell them apart.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct VocabError : Error { using Error::Error; };
struct LengthError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct InputError : Error { using Error::Error; };
struct AlignmentError : Error { using Error::Error; };
struct SupportError : Error { using Error::Error; };
struct StalenessError : Error { using Error::Error; };
struct DistinctnessError : Error { using Error::Error; };
struct DegenerateError : Error { using Error::Error; };
struct QueryError : Error { using Error::Error; };
struct EmptyPoolError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

// Checkpoint loading failures, one type per cause.
struct CheckpointError : Error { using Error::Error; };
struct BadMagicError : CheckpointError { using CheckpointError::CheckpointError; };
struct BadVersionError : CheckpointError { using CheckpointError::CheckpointError; };
struct TruncatedFileError : CheckpointError { using CheckpointError::CheckpointError; };
struct ShapeDisagreementError : CheckpointError { using CheckpointError::CheckpointError; };

// Teacher transport / wire protocol failures.
struct TransportError : Error { using Error::Error; };
struct TimeoutError : TransportError { using TransportError::TransportError; };
struct ConnectionError : TransportError { using TransportError::TransportError; };
struct ProtocolError : Error { using Error::Error; };
struct ProtocolVersionError : ProtocolError { using ProtocolError::ProtocolError; };
struct RemoteError : Error {
    std::string code;
    RemoteError(std::string c, const std::string& msg) : Error(msg), code(std::move(c)) {}
};

}  // namespace ssum
