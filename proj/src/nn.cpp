#include "forgetlab/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "forgetlab/error.hpp"

namespace forgetlab {

std::string group::conv_block(std::size_t k) { return fmt::format("CONV_BLOCK_{}", k); }

std::string_view to_string(Arch arch) {
  switch (arch) {
    case Arch::mlp: return "MLP";
    case Arch::mlp_bn: return "MLP_BN";
    case Arch::cnn_bn: return "CNN_BN";
  }
  return "?";
}

Arch parse_arch(std::string_view name) {
  if (name == "MLP") return Arch::mlp;
  if (name == "MLP_BN") return Arch::mlp_bn;
  if (name == "CNN_BN") return Arch::cnn_bn;
  fail(ErrorCode::config_invalid, fmt::format("unknown architecture '{}'", name));
}

// ---- Dense -----------------------------------------------------------------

Dense::Dense(std::size_t in, std::size_t out)
    : weight(Tensor::zeros({in, out}, true)), bias(Tensor::zeros({out}, true)) {}

Tensor Dense::forward(const Tensor& x, Mode) {
  const std::size_t in = weight.dim(0);
  Tensor flat = x;
  if (x.rank() != 2) {
    const std::size_t rows = x.rank() == 0 ? 0 : x.dim(0);
    flat = reshape(x, {rows, rows == 0 ? in : x.numel() / rows});
  }
  if (flat.dim(1) != in) {
    fail(ErrorCode::shape_mismatch, fmt::format("dense: expected {} features, got {}", in, flat.dim(1)));
  }
  return add_row_bias(matmul(flat, weight), bias);
}

Shape Dense::output_shape(const Shape& in) const {
  if (shape_numel(in) != weight.dim(0)) {
    fail(ErrorCode::shape_mismatch, fmt::format("dense: expected {} features, got {}", weight.dim(0), shape_numel(in)));
  }
  return {weight.dim(1)};
}

std::uint64_t Dense::forward_flops(const Shape&) const { return 2ULL * weight.dim(0) * weight.dim(1); }

void Dense::collect(std::vector<ParamSlot>& out, std::size_t layer_index) const {
  out.push_back({"weight", weight_group, layer_index, weight, true});
  out.push_back({"bias", weight_group, layer_index, bias, true});
}

std::unique_ptr<Layer> Dense::clone() const {
  auto copy = std::make_unique<Dense>(*this);
  copy->weight = weight.clone();
  copy->weight.set_requires_grad(true);
  copy->bias = bias.clone();
  copy->bias.set_requires_grad(true);
  return copy;
}

// ---- Conv2d ----------------------------------------------------------------

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride_,
               std::size_t padding_)
    : weight(Tensor::zeros({out_channels, in_channels, kernel, kernel}, true)), stride(stride_), padding(padding_) {}

Tensor Conv2d::forward(const Tensor& x, Mode) { return conv2d(x, weight, stride, padding); }

Shape Conv2d::output_shape(const Shape& in) const {
  if (in.size() != 3 || in[0] != weight.dim(1)) {
    fail(ErrorCode::shape_mismatch, "conv2d: per-sample input must be [C,H,W] matching the weight");
  }
  const std::size_t k = weight.dim(2);
  return {weight.dim(0), (in[1] + 2 * padding - k) / stride + 1, (in[2] + 2 * padding - k) / stride + 1};
}

std::uint64_t Conv2d::forward_flops(const Shape& in) const {
  const Shape out = output_shape(in);
  return 2ULL * weight.dim(2) * weight.dim(3) * weight.dim(1) * weight.dim(0) * out[1] * out[2];
}

void Conv2d::collect(std::vector<ParamSlot>& out, std::size_t layer_index) const {
  out.push_back({"weight", weight_group, layer_index, weight, true});
}

std::unique_ptr<Layer> Conv2d::clone() const {
  auto copy = std::make_unique<Conv2d>(*this);
  copy->weight = weight.clone();
  copy->weight.set_requires_grad(true);
  return copy;
}

// ---- BatchNorm -------------------------------------------------------------

BatchNorm::BatchNorm(std::size_t channels, double momentum_, double eps_)
    : gamma(Tensor::full({channels}, 1.0, true)),
      beta(Tensor::zeros({channels}, true)),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0)),
      momentum(momentum_),
      eps(eps_) {}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  if (mode != Mode::train) {
    return batch_norm_fixed(x, gamma, beta, running_mean.data(), running_var.data(), eps);
  }
  auto r = batch_norm_train(x, gamma, beta, eps);
  auto mu = running_mean.mutable_data();
  auto var = running_var.mutable_data();
  const double unbias = r.count > 1 ? static_cast<double>(r.count) / static_cast<double>(r.count - 1) : 1.0;
  for (std::size_t c = 0; c < mu.size(); ++c) {
    mu[c] = (1.0 - momentum) * mu[c] + momentum * r.batch_mean[c];
    var[c] = (1.0 - momentum) * var[c] + momentum * r.batch_var[c] * unbias;
  }
  return std::move(r.output);
}

std::uint64_t BatchNorm::forward_flops(const Shape& in) const { return flops_per_element * shape_numel(in); }

void BatchNorm::collect(std::vector<ParamSlot>& out, std::size_t layer_index) const {
  out.push_back({"gamma", weight_group, layer_index, gamma, true});
  out.push_back({"beta", weight_group, layer_index, beta, true});
  out.push_back({"running_mean", stats_group, layer_index, running_mean, false});
  out.push_back({"running_var", stats_group, layer_index, running_var, false});
}

std::unique_ptr<Layer> BatchNorm::clone() const {
  auto copy = std::make_unique<BatchNorm>(*this);
  copy->gamma = gamma.clone();
  copy->gamma.set_requires_grad(true);
  copy->beta = beta.clone();
  copy->beta.set_requires_grad(true);
  copy->running_mean = running_mean.clone();
  copy->running_var = running_var.clone();
  return copy;
}

// ---- ReLU / pooling --------------------------------------------------------

Tensor ReLU::forward(const Tensor& x, Mode) { return relu(x); }

std::uint64_t ReLU::forward_flops(const Shape& in) const { return flops_per_element * shape_numel(in); }

Tensor GlobalAvgPool::forward(const Tensor& x, Mode) { return global_avg_pool(x); }

Shape GlobalAvgPool::output_shape(const Shape& in) const {
  if (in.size() != 3) fail(ErrorCode::shape_mismatch, "gap: per-sample input must be [C,H,W]");
  return {in[0]};
}

std::uint64_t GlobalAvgPool::forward_flops(const Shape& in) const { return shape_numel(in); }

// ---- SelectionMask ---------------------------------------------------------

SelectionMask::SelectionMask(std::initializer_list<std::string_view> groups) {
  for (auto g : groups) groups_.emplace(g);
}

std::string SelectionMask::to_string() const { return fmt::format("{}", fmt::join(groups_, ",")); }

SelectionMask parse_mask(std::string_view text) {
  SelectionMask mask;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find(',', start);
    if (end == std::string_view::npos) end = text.size();
    auto token = text.substr(start, end - start);
    while (!token.empty() && token.front() == ' ') token.remove_prefix(1);
    while (!token.empty() && token.back() == ' ') token.remove_suffix(1);
    if (!token.empty()) mask.insert(std::string(token));
    start = end + 1;
  }
  return mask;
}

// ---- snapshots -------------------------------------------------------------

std::vector<double> GroupVectors::flat() const {
  std::vector<double> out;
  out.reserve(param_count());
  for (const auto& l : layers) out.insert(out.end(), l.values.begin(), l.values.end());
  return out;
}

std::size_t GroupVectors::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.values.size();
  return n;
}

const GroupVectors& ModelSnapshot::group(std::string_view id) const {
  for (const auto& g : groups) {
    if (g.group_id == id) return g;
  }
  fail(ErrorCode::unknown_group, fmt::format("snapshot has no group {}", id));
}

// ---- Model -----------------------------------------------------------------

Model::Model(ModelSpec spec, std::vector<std::unique_ptr<Layer>> layers)
    : spec_(std::move(spec)), layers_(std::move(layers)) {}

Model::Model(const Model& other) : spec_(other.spec_) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Model& Model::operator=(const Model& other) {
  if (this != &other) *this = Model(other);
  return *this;
}

Tensor Model::forward(const Tensor& batch, Mode mode) {
  if (batch.rank() != spec_.input_shape.size() + 1 ||
      !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), batch.shape().begin() + 1)) {
    fail(ErrorCode::shape_mismatch, "model: batch shape does not match the input shape");
  }
  std::optional<NoGradGuard> guard;
  if (mode == Mode::eval) guard.emplace();
  Tensor h = batch;
  for (auto& layer : layers_) h = layer->forward(h, mode);
  return h;
}

Tensor Model::forward(std::span<const double> samples, std::size_t batch, Mode mode) {
  Shape shape{batch};
  shape.insert(shape.end(), spec_.input_shape.begin(), spec_.input_shape.end());
  return forward(Tensor(std::move(shape), std::vector<double>(samples.begin(), samples.end())), mode);
}

std::vector<ParamSlot> Model::slots() const {
  std::vector<ParamSlot> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect(out, i);
  return out;
}

std::vector<ParameterGroup> Model::groups() const {
  std::vector<ParameterGroup> out;
  for (const auto& s : slots()) {
    auto it = std::find_if(out.begin(), out.end(), [&](const ParameterGroup& g) { return g.group_id == s.group; });
    if (it == out.end()) {
      out.push_back({s.group, {}, 0});
      it = std::prev(out.end());
    }
    if (it->layer_ids.empty() || it->layer_ids.back() != s.layer_index) it->layer_ids.push_back(s.layer_index);
    it->param_count += s.tensor.numel();
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : slots()) n += s.tensor.numel();
  return n;
}

void Model::zero_grad() {
  for (auto& s : slots()) s.tensor.clear_grad();
}

void Model::sgd_step(double lr, const SelectionMask& mask) {
  for (auto& s : slots()) {
    if (!s.trainable) continue;
    if (mask.contains(s.group) && s.tensor.has_grad()) {
      auto w = s.tensor.mutable_data();
      auto g = s.tensor.grad();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    }
    s.tensor.clear_grad();
  }
}

void Model::sgd_step(double lr) { sgd_step(lr, all_groups()); }

SelectionMask Model::all_groups() const {
  SelectionMask mask;
  for (const auto& g : groups()) mask.insert(g.group_id);
  return mask;
}

ModelSnapshot Model::snapshot(int task, int epoch) const {
  ModelSnapshot snap{task, epoch, {}};
  for (const auto& s : slots()) {
    auto git = std::find_if(snap.groups.begin(), snap.groups.end(),
                            [&](const GroupVectors& g) { return g.group_id == s.group; });
    if (git == snap.groups.end()) {
      snap.groups.push_back({s.group, {}});
      git = std::prev(snap.groups.end());
    }
    if (git->layers.empty() || git->layers.back().layer_index != s.layer_index) {
      git->layers.push_back({s.layer_index, {}});
    }
    auto& v = git->layers.back().values;
    v.insert(v.end(), s.tensor.data().begin(), s.tensor.data().end());
  }
  return snap;
}

std::vector<LayerFlops> Model::layer_flops(std::size_t batch) const {
  std::vector<LayerFlops> out;
  Shape shape = spec_.input_shape;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::uint64_t fwd = layers_[i]->forward_flops(shape) * batch;
    out.push_back({fmt::format("{}:{}", i, layers_[i]->kind()), fwd, 2 * fwd});
    shape = layers_[i]->output_shape(shape);
  }
  return out;
}

std::uint64_t Model::forward_flops(std::size_t batch) const {
  std::uint64_t total = 0;
  for (const auto& l : layer_flops(batch)) total += l.forward;
  return total;
}

// ---- builders --------------------------------------------------------------

namespace {

std::vector<std::unique_ptr<Layer>> make_layers(const ModelSpec& spec) {
  if (spec.num_classes == 0) fail(ErrorCode::config_invalid, "model: num_classes must be positive");
  std::vector<std::unique_ptr<Layer>> layers;
  auto push_bn = [&](std::size_t channels) {
    auto bn = std::make_unique<BatchNorm>(channels, spec.bn_momentum, spec.bn_eps);
    bn->weight_group = group::bn_affine;
    bn->stats_group = group::bn_stats;
    layers.push_back(std::move(bn));
  };

  std::size_t features = 0;
  if (spec.arch == Arch::cnn_bn) {
    if (spec.input_shape.size() != 3) fail(ErrorCode::config_invalid, "CNN_BN needs a [C,H,W] input shape");
    if (spec.conv_channels.empty()) fail(ErrorCode::config_invalid, "CNN_BN needs at least one conv stage");
    std::size_t in_ch = spec.input_shape[0];
    for (std::size_t k = 0; k < spec.conv_channels.size(); ++k) {
      // First stage keeps resolution, later stages halve it.
      auto conv = std::make_unique<Conv2d>(in_ch, spec.conv_channels[k], 3, k == 0 ? 1 : 2, 1);
      conv->weight_group = k == 0 ? std::string(group::conv1) : group::conv_block(k + 1);
      layers.push_back(std::move(conv));
      push_bn(spec.conv_channels[k]);
      layers.push_back(std::make_unique<ReLU>());
      in_ch = spec.conv_channels[k];
    }
    layers.push_back(std::make_unique<GlobalAvgPool>());
    features = in_ch;
  } else {
    features = shape_numel(spec.input_shape);
    for (std::size_t width : spec.hidden_widths) {
      auto dense = std::make_unique<Dense>(features, width);
      dense->weight_group = group::fc_hidden;
      layers.push_back(std::move(dense));
      if (spec.arch == Arch::mlp_bn) push_bn(width);
      layers.push_back(std::make_unique<ReLU>());
      features = width;
    }
  }
  auto head = std::make_unique<Dense>(features, spec.num_classes);
  head->weight_group = group::fc_last;
  layers.push_back(std::move(head));
  return layers;
}

}  // namespace

Model build_model(const ModelSpec& spec, Rng& rng) {
  auto layers = make_layers(spec);
  // He-normal weights, zero biases, identity BN.
  for (auto& layer : layers) {
    Tensor* w = nullptr;
    std::size_t fan_in = 0;
    if (auto* d = dynamic_cast<Dense*>(layer.get())) {
      w = &d->weight;
      fan_in = d->weight.dim(0);
    } else if (auto* c = dynamic_cast<Conv2d*>(layer.get())) {
      w = &c->weight;
      fan_in = c->weight.dim(1) * c->weight.dim(2) * c->weight.dim(3);
    }
    if (w == nullptr || fan_in == 0) continue;
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : w->mutable_data()) v = stddev * rng.normal();
  }
  return Model(spec, std::move(layers));
}

Model build_zero_model(const ModelSpec& spec) { return Model(spec, make_layers(spec)); }

double group_fraction(const std::vector<ParameterGroup>& groups, const SelectionMask& mask) {
  std::size_t total = 0, selected = 0;
  for (const auto& id : mask.groups()) {
    const bool known = std::any_of(groups.begin(), groups.end(), [&](const ParameterGroup& g) { return g.group_id == id; });
    if (!known) fail(ErrorCode::unknown_group, fmt::format("group_fraction: unknown group {}", id));
  }
  for (const auto& g : groups) {
    total += g.param_count;
    if (mask.contains(g.group_id)) selected += g.param_count;
  }
  return total == 0 ? 0.0 : static_cast<double>(selected) / static_cast<double>(total);
}

}  // namespace forgetlab
