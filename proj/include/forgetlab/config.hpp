#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "forgetlab/engine.hpp"
#include "forgetlab/nn.hpp"
#include "forgetlab/streams.hpp"

namespace forgetlab {

inline constexpr std::string_view code_version = "forgetlab 0.1.0";

struct ModelSection {
  Arch arch = Arch::mlp_bn;
  std::vector<std::size_t> hidden_widths{100, 100};
  std::vector<std::size_t> conv_channels{8, 16, 32};
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
};

/// Optional FPF pass after the CL run (e.g. FPF+ER).
struct PostHocSection {
  bool enabled = false;
  std::string mask = "BN_AFFINE,BN_STATS,FC_LAST";  // or "auto"
  double threshold = fpf_threshold;                  // for "auto"
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  double peak_lr = 0.05;
};

struct KfpfSection {
  /// SGD steps between passes; 0 sizes tau so that `passes` FPF passes
  /// (periodic plus trailing) run over the stream.
  std::size_t tau = 0;
  std::size_t passes = 5;
  FinetuneObjective variant = FinetuneObjective::ce;
  double lambda = 0.5;
  std::size_t identify_step = 0;
  std::string mask = "auto";
  double threshold = kfpf_threshold;
  std::size_t probes = 4;
  std::size_t steps = 100;
  std::size_t batch_size = 32;
  double peak_lr = 0.05;
};

struct RunConfig {
  std::string name;  // run id; empty resolves to "<method>-s<seed>"
  Method method = Method::sgd;
  std::uint64_t seed = 0;
  StreamSpec stream;  // stream.seed is the data seed
  ModelSection model;
  TrainConfig train;  // method and seed mirror the top-level fields
  std::size_t gdumb_steps = 300;
  double gdumb_lr = 0.05;
  PostHocSection fpf;
  KfpfSection kfpf;

  std::string run_id() const;
};

/// Parses and validates a config tree. Unknown keys and bad values throw
/// ConfigInvalid naming the offending field. Missing keys take defaults;
/// a missing stream.seed follows the run seed.
RunConfig parse_run_config(const nlohmann::json& tree);
RunConfig parse_run_config_text(std::string_view text);

/// Fully resolved tree; parse_run_config(to_json(c)) reproduces c.
nlohmann::ordered_json to_json(const RunConfig& config);

ModelSpec model_spec_for(const RunConfig& config, const Stream& stream);

/// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::string& path);

std::string utc_timestamp();

}  // namespace forgetlab
