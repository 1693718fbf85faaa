#include "forgetlab/config.hpp"

#include <chrono>
#include <ctime>
#include <set>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "forgetlab/binary_io.hpp"
#include "forgetlab/error.hpp"

namespace forgetlab {
namespace {

using nlohmann::json;

// Reads one object level, tracking consumed keys so leftovers can be
// reported as unknown fields.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) fail(ErrorCode::config_invalid, fmt::format("{}: expected an object", where()));
  }

  bool has(const std::string& key) const { return node_.contains(key) && !node_.at(key).is_null(); }

  template <class T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!has(key)) return;
    try {
      out = node_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(ErrorCode::config_invalid, fmt::format("{}: wrong type", field(key)));
    }
  }

  Section sub(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(has(key) ? node_.at(key) : empty, field(key));
  }

  void mark(const std::string& key) { seen_.insert(key); }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : node_.items()) {
      if (!seen_.count(key)) fail(ErrorCode::config_invalid, fmt::format("{}: unknown field", field(key)));
    }
  }

  const json& node() const { return node_; }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

[[noreturn]] void bad(const std::string& field, std::string_view why) {
  fail(ErrorCode::config_invalid, fmt::format("{}: {}", field, why));
}

template <class F>
auto parse_enum(const std::string& field, const std::string& value, F parse) {
  try {
    return parse(value);
  } catch (const Error&) {
    bad(field, fmt::format("unknown value '{}'", value));
  }
}

StreamMode parse_stream_mode(const std::string& s) {
  if (s == "class_il") return StreamMode::class_il;
  if (s == "domain_il") return StreamMode::domain_il;
  fail(ErrorCode::config_invalid, s);
}

DomainTransform parse_transform(const std::string& s) {
  if (s == "permute_pixels") return DomainTransform::permute_pixels;
  if (s == "rotate") return DomainTransform::rotate;
  fail(ErrorCode::config_invalid, s);
}

FinetuneObjective parse_objective(const std::string& s) {
  if (s == "ce") return FinetuneObjective::ce;
  if (s == "kd") return FinetuneObjective::kd;
  fail(ErrorCode::config_invalid, s);
}

void check_mask_text(const std::string& field, const std::string& text, bool allow_auto) {
  if (allow_auto && text == "auto") return;
  if (parse_mask(text).empty()) bad(field, "mask names no group");
}

}  // namespace

std::string RunConfig::run_id() const {
  return name.empty() ? fmt::format("{}-s{}", to_string(method), seed) : name;
}

RunConfig parse_run_config(const json& tree) {
  RunConfig c;
  Section root(tree, "");
  root.read("name", c.name);
  std::string method = "sgd";
  root.read("method", method);
  c.method = parse_enum("method", method, parse_method);
  root.read("seed", c.seed);

  {
    Section s = root.sub("stream");
    std::string mode = "class_il";
    s.read("mode", mode);
    c.stream.mode = parse_enum(s.field("mode"), mode, parse_stream_mode);
    s.read("tasks", c.stream.tasks);
    s.read("class_chunks", c.stream.class_chunks);
    s.read("source", c.stream.source);
    s.read("num_classes", c.stream.num_classes);
    s.read("dim", c.stream.dim);
    s.read("image_shape", c.stream.image_shape);
    s.read("per_class", c.stream.per_class);
    s.read("sep", c.stream.sep);
    s.read("idx_images", c.stream.idx_images);
    s.read("idx_labels", c.stream.idx_labels);
    std::string transform = "permute_pixels";
    s.read("transform", transform);
    c.stream.transform = parse_enum(s.field("transform"), transform, parse_transform);
    s.read("rotate_step_deg", c.stream.rotate_step_deg);
    s.read("val_fraction", c.stream.val_fraction);
    c.stream.seed = c.seed;
    s.read("seed", c.stream.seed);
    s.finish();
    if (c.stream.tasks < 1) bad("stream.tasks", "must be >= 1");
    if (c.stream.source != "synthetic_gaussian" && c.stream.source != "idx_files") {
      bad("stream.source", fmt::format("unknown source '{}'", c.stream.source));
    }
    if (c.stream.source == "idx_files" && (c.stream.idx_images.empty() || c.stream.idx_labels.empty())) {
      bad("stream.idx_images", "idx_files source needs idx_images and idx_labels");
    }
    if (!(c.stream.val_fraction >= 0.0 && c.stream.val_fraction < 1.0)) bad("stream.val_fraction", "must be in [0,1)");
    if (c.stream.per_class == 0) bad("stream.per_class", "must be >= 1");
  }
  {
    Section s = root.sub("model");
    std::string arch = std::string(to_string(c.model.arch));
    s.read("arch", arch);
    c.model.arch = parse_enum(s.field("arch"), arch, parse_arch);
    s.read("hidden_widths", c.model.hidden_widths);
    s.read("conv_channels", c.model.conv_channels);
    s.read("bn_momentum", c.model.bn_momentum);
    s.read("bn_eps", c.model.bn_eps);
    s.finish();
    if (!(c.model.bn_momentum > 0.0 && c.model.bn_momentum <= 1.0)) bad("model.bn_momentum", "must be in (0,1]");
    if (!(c.model.bn_eps > 0.0)) bad("model.bn_eps", "must be > 0");
    if (c.model.arch == Arch::cnn_bn && c.model.conv_channels.empty()) bad("model.conv_channels", "must be nonempty");
  }
  {
    Section s = root.sub("train");
    s.read("lr", c.train.lr);
    s.read("batch_size", c.train.batch_size);
    s.read("replay_batch_size", c.train.replay_batch_size);
    s.read("epochs_per_task", c.train.epochs_per_task);
    s.read("buffer_capacity", c.train.buffer_capacity);
    s.read("der_lambda", c.train.der_lambda);
    double momentum = 0.0;
    s.read("momentum", momentum);
    if (momentum != 0.0) bad("train.momentum", "only plain SGD (momentum 0) is supported");
    s.read("gdumb_steps", c.gdumb_steps);
    s.read("gdumb_lr", c.gdumb_lr);
    s.finish();
    c.train.method = c.method;
    c.train.seed = c.seed;
    try {
      validate(c.train);
    } catch (const Error& e) {
      bad("train", e.what());
    }
    if (!(c.gdumb_lr > 0.0)) bad("train.gdumb_lr", "must be > 0");
  }
  {
    Section s = root.sub("fpf");
    s.read("enabled", c.fpf.enabled);
    s.read("mask", c.fpf.mask);
    s.read("threshold", c.fpf.threshold);
    s.read("steps", c.fpf.steps);
    s.read("batch_size", c.fpf.batch_size);
    s.read("peak_lr", c.fpf.peak_lr);
    s.finish();
    check_mask_text("fpf.mask", c.fpf.mask, true);
    if (c.fpf.batch_size == 0) bad("fpf.batch_size", "must be >= 1");
    if (!(c.fpf.peak_lr > 0.0)) bad("fpf.peak_lr", "must be > 0");
    if (c.fpf.enabled && c.train.buffer_capacity == 0) bad("fpf.enabled", "needs train.buffer_capacity > 0");
  }
  {
    Section s = root.sub("kfpf");
    s.read("tau", c.kfpf.tau);
    s.read("passes", c.kfpf.passes);
    std::string variant = "ce";
    s.read("variant", variant);
    c.kfpf.variant = parse_enum(s.field("variant"), variant, parse_objective);
    s.read("lambda", c.kfpf.lambda);
    s.read("identify_step", c.kfpf.identify_step);
    s.read("mask", c.kfpf.mask);
    s.read("threshold", c.kfpf.threshold);
    s.read("probes", c.kfpf.probes);
    s.read("steps", c.kfpf.steps);
    s.read("batch_size", c.kfpf.batch_size);
    s.read("peak_lr", c.kfpf.peak_lr);
    s.finish();
    if (c.kfpf.tau == 0 && c.kfpf.passes == 0) bad("kfpf.passes", "must be >= 1 when tau is 0");
    if (!(c.kfpf.lambda >= 0.0)) bad("kfpf.lambda", "must be >= 0");
    check_mask_text("kfpf.mask", c.kfpf.mask, true);
    if (c.kfpf.batch_size == 0) bad("kfpf.batch_size", "must be >= 1");
    if (!(c.kfpf.peak_lr > 0.0)) bad("kfpf.peak_lr", "must be > 0");
  }
  root.finish();
  return c;
}

RunConfig parse_run_config_text(std::string_view text) {
  json tree;
  try {
    tree = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::config_invalid, fmt::format("config is not valid JSON: {}", e.what()));
  }
  return parse_run_config(tree);
}

nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["name"] = c.run_id();
  j["method"] = to_string(c.method);
  j["seed"] = c.seed;
  auto& s = j["stream"];
  s["mode"] = c.stream.mode == StreamMode::class_il ? "class_il" : "domain_il";
  s["tasks"] = c.stream.tasks;
  s["class_chunks"] = c.stream.class_chunks;
  s["source"] = c.stream.source;
  s["num_classes"] = c.stream.num_classes;
  s["dim"] = c.stream.dim;
  s["image_shape"] = c.stream.image_shape;
  s["per_class"] = c.stream.per_class;
  s["sep"] = c.stream.sep;
  s["idx_images"] = c.stream.idx_images;
  s["idx_labels"] = c.stream.idx_labels;
  s["transform"] = to_string(c.stream.transform);
  s["rotate_step_deg"] = c.stream.rotate_step_deg;
  s["val_fraction"] = c.stream.val_fraction;
  s["seed"] = c.stream.seed;
  auto& m = j["model"];
  m["arch"] = to_string(c.model.arch);
  m["hidden_widths"] = c.model.hidden_widths;
  m["conv_channels"] = c.model.conv_channels;
  m["bn_momentum"] = c.model.bn_momentum;
  m["bn_eps"] = c.model.bn_eps;
  auto& t = j["train"];
  t["lr"] = c.train.lr;
  t["batch_size"] = c.train.batch_size;
  t["replay_batch_size"] = c.train.replay_batch_size;
  t["epochs_per_task"] = c.train.epochs_per_task;
  t["buffer_capacity"] = c.train.buffer_capacity;
  t["der_lambda"] = c.train.der_lambda;
  t["momentum"] = 0.0;
  t["gdumb_steps"] = c.gdumb_steps;
  t["gdumb_lr"] = c.gdumb_lr;
  auto& f = j["fpf"];
  f["enabled"] = c.fpf.enabled;
  f["mask"] = c.fpf.mask;
  f["threshold"] = c.fpf.threshold;
  f["steps"] = c.fpf.steps;
  f["batch_size"] = c.fpf.batch_size;
  f["peak_lr"] = c.fpf.peak_lr;
  auto& k = j["kfpf"];
  k["tau"] = c.kfpf.tau;
  k["passes"] = c.kfpf.passes;
  k["variant"] = to_string(c.kfpf.variant);
  k["lambda"] = c.kfpf.lambda;
  k["identify_step"] = c.kfpf.identify_step;
  k["mask"] = c.kfpf.mask;
  k["threshold"] = c.kfpf.threshold;
  k["probes"] = c.kfpf.probes;
  k["steps"] = c.kfpf.steps;
  k["batch_size"] = c.kfpf.batch_size;
  k["peak_lr"] = c.kfpf.peak_lr;
  return j;
}

ModelSpec model_spec_for(const RunConfig& config, const Stream& stream) {
  ModelSpec spec;
  spec.arch = config.model.arch;
  spec.input_shape = stream.sample_shape;
  spec.num_classes = stream.num_classes;
  spec.hidden_widths = config.model.hidden_widths;
  spec.conv_channels = config.model.conv_channels;
  spec.bn_momentum = config.model.bn_momentum;
  spec.bn_eps = config.model.bn_eps;
  return spec;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorCode::io_error, "sha256 failed");
  }
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", digest[i]);
  return out;
}

std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace forgetlab
