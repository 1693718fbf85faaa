#include "forgetlab/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include <fmt/format.h>
#include <json.hpp>

#include "forgetlab/binary_io.hpp"

namespace forgetlab {
namespace {

constexpr std::string_view checkpoint_magic{"FLCKPT\0\0", 8};

}  // namespace

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io_error, fmt::format("cannot open {}", path));
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io_error, fmt::format("cannot write {}", path));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io_error, fmt::format("write failed for {}", path));
}

std::string model_spec_to_json(const ModelSpec& spec) {
  nlohmann::ordered_json j;
  j["arch"] = to_string(spec.arch);
  j["input_shape"] = spec.input_shape;
  j["num_classes"] = spec.num_classes;
  j["hidden_widths"] = spec.hidden_widths;
  j["conv_channels"] = spec.conv_channels;
  j["bn_momentum"] = spec.bn_momentum;
  j["bn_eps"] = spec.bn_eps;
  return j.dump();
}

ModelSpec model_spec_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelSpec spec;
    spec.arch = parse_arch(j.at("arch").get<std::string>());
    spec.input_shape = j.at("input_shape").get<Shape>();
    spec.num_classes = j.at("num_classes").get<std::size_t>();
    spec.hidden_widths = j.at("hidden_widths").get<std::vector<std::size_t>>();
    spec.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
    spec.bn_momentum = j.at("bn_momentum").get<double>();
    spec.bn_eps = j.at("bn_eps").get<double>();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::bad_format, fmt::format("model spec: {}", e.what()));
  }
}

std::string encode_checkpoint(const Model& model, int task, int epoch) {
  ByteWriter w;
  w.raw(checkpoint_magic);
  w.u32(checkpoint_version);
  w.str(model_spec_to_json(model.spec()));
  w.i32(task);
  w.i32(epoch);
  const auto slots = model.slots();
  w.u32(static_cast<std::uint32_t>(slots.size()));
  for (const auto& s : slots) {
    w.str(s.name);
    w.str(s.group);
    w.u32(static_cast<std::uint32_t>(s.layer_index));
    w.f64s(s.tensor.data());
  }
  return w.bytes();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  if (bytes.size() < checkpoint_magic.size() || r.raw(checkpoint_magic.size()) != checkpoint_magic) {
    fail(ErrorCode::bad_magic, "not a checkpoint file");
  }
  const auto version = r.u32();
  if (version != checkpoint_version) fail(ErrorCode::bad_format, fmt::format("checkpoint version {}", version));
  Model model = build_zero_model(model_spec_from_json(r.str()));
  const int task = r.i32();
  const int epoch = r.i32();
  auto slots = model.slots();
  const auto count = r.u32();
  if (count != slots.size()) fail(ErrorCode::bad_format, "checkpoint slot count does not match the model");
  for (auto& s : slots) {
    const auto name = r.str();
    const auto grp = r.str();
    const auto layer = r.u32();
    auto values = r.f64s();
    if (name != s.name || grp != s.group || layer != s.layer_index || values.size() != s.tensor.numel()) {
      fail(ErrorCode::bad_format, fmt::format("checkpoint slot {}/{} does not match the model", layer, name));
    }
    std::copy(values.begin(), values.end(), s.tensor.mutable_data().begin());
  }
  if (!r.done()) fail(ErrorCode::bad_format, "trailing bytes after checkpoint");
  return {std::move(model), task, epoch};
}

void save_checkpoint(const std::string& path, const Model& model, int task, int epoch) {
  write_file(path, encode_checkpoint(model, task, epoch));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace forgetlab
