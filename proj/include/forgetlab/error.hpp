#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace forgetlab {

enum class ErrorCode {
  shape_mismatch,
  not_scalar,
  empty_range,
  numeric,
  unknown_group,
  bad_partition,
  unsupported_transform,
  infeasible_separation,
  bad_magic,
  count_mismatch,
  truncated,
  empty_buffer,
  empty_mask,
  missing_logits,
  label_out_of_range,
  step_out_of_range,
  length_mismatch,
  empty_vector,
  missing_snapshot,
  all_zero_dynamics,
  insufficient_history,
  config_invalid,
  io_error,
  missing_snapshots,
  missing_buffer,
  bad_format,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& what);

}  // namespace forgetlab
