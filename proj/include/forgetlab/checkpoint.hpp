#pragma once

#include <string>

#include "forgetlab/nn.hpp"

namespace forgetlab {

/// Binary checkpoint, little-endian:
///   "FLCKPT\0\0" | u32 version | str model-spec JSON | i32 task | i32 epoch |
///   u32 slot count | per slot: str name, str group, u32 layer, f64s values
/// Strings are u32-length-prefixed; f64s are u64-count-prefixed.
struct Checkpoint {
  Model model;
  int task = 0;
  int epoch = 0;
};

inline constexpr std::uint32_t checkpoint_version = 1;

std::string encode_checkpoint(const Model& model, int task, int epoch);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string& path, const Model& model, int task, int epoch);
Checkpoint load_checkpoint(const std::string& path);

std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(std::string_view json);

}  // namespace forgetlab
