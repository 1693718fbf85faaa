#include "forgetlab/error.hpp"

namespace forgetlab {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "ShapeMismatch";
    case ErrorCode::not_scalar: return "NotScalar";
    case ErrorCode::empty_range: return "EmptyRange";
    case ErrorCode::numeric: return "NumericError";
    case ErrorCode::unknown_group: return "UnknownGroup";
    case ErrorCode::bad_partition: return "BadPartition";
    case ErrorCode::unsupported_transform: return "UnsupportedTransform";
    case ErrorCode::infeasible_separation: return "InfeasibleSeparation";
    case ErrorCode::bad_magic: return "BadMagic";
    case ErrorCode::count_mismatch: return "CountMismatch";
    case ErrorCode::truncated: return "Truncated";
    case ErrorCode::empty_buffer: return "EmptyBuffer";
    case ErrorCode::empty_mask: return "EmptyMask";
    case ErrorCode::missing_logits: return "MissingLogits";
    case ErrorCode::label_out_of_range: return "LabelOutOfRange";
    case ErrorCode::step_out_of_range: return "StepOutOfRange";
    case ErrorCode::length_mismatch: return "LengthMismatch";
    case ErrorCode::empty_vector: return "EmptyVector";
    case ErrorCode::missing_snapshot: return "MissingSnapshot";
    case ErrorCode::all_zero_dynamics: return "AllZeroDynamics";
    case ErrorCode::insufficient_history: return "InsufficientHistory";
    case ErrorCode::config_invalid: return "ConfigInvalid";
    case ErrorCode::io_error: return "IoError";
    case ErrorCode::missing_snapshots: return "MissingSnapshots";
    case ErrorCode::missing_buffer: return "MissingBuffer";
    case ErrorCode::bad_format: return "BadFormat";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace forgetlab
