#pragma once

#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "forgetlab/rng.hpp"
#include "forgetlab/tensor.hpp"

namespace forgetlab {

namespace group {
inline constexpr std::string_view conv1 = "CONV1";
inline constexpr std::string_view bn_affine = "BN_AFFINE";
inline constexpr std::string_view bn_stats = "BN_STATS";
inline constexpr std::string_view fc_hidden = "FC_HIDDEN";
inline constexpr std::string_view fc_last = "FC_LAST";
/// CONV_BLOCK_k for the k-th convolution (k >= 2).
std::string conv_block(std::size_t k);
}  // namespace group

enum class Arch { mlp, mlp_bn, cnn_bn };

std::string_view to_string(Arch arch);
Arch parse_arch(std::string_view name);

/// train: batch statistics, running statistics updated, graph recorded.
/// eval: running statistics, nothing recorded.
/// frozen_stats: running statistics left untouched, graph recorded (used by
/// masked finetuning when BN_STATS is not selected).
enum class Mode { train, eval, frozen_stats };

struct ModelSpec {
  Arch arch = Arch::mlp;
  Shape input_shape{16};  // per sample; CNN expects {C, H, W}
  std::size_t num_classes = 10;
  std::vector<std::size_t> hidden_widths{100, 100};
  std::vector<std::size_t> conv_channels{8, 16, 32};
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Handle to one parameter tensor owned by a layer (shares storage).
/// Statistical slots (BN running mean/variance) are never touched by the
/// optimizer.
struct ParamSlot {
  std::string name;
  std::string group;
  std::size_t layer_index = 0;
  Tensor tensor;
  bool trainable = true;
};

struct ParameterGroup {
  std::string group_id;
  std::vector<std::size_t> layer_ids;
  std::size_t param_count = 0;
};

struct LayerFlops {
  std::string layer;
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string_view kind() const = 0;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  /// Per-sample output shape for a per-sample input shape.
  virtual Shape output_shape(const Shape& in) const = 0;
  /// Forward FLOPs for one sample of the given per-sample input shape.
  virtual std::uint64_t forward_flops(const Shape& in) const = 0;
  virtual void collect(std::vector<ParamSlot>& out, std::size_t layer_index) const {
    (void)out, (void)layer_index;
  }
  virtual std::unique_ptr<Layer> clone() const = 0;

  // Grouping labels assigned by the model builder.
  std::string weight_group;
  std::string stats_group;
};

class Dense final : public Layer {
 public:
  Dense(std::size_t in, std::size_t out);

  std::string_view kind() const override { return "dense"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override;
  std::uint64_t forward_flops(const Shape& in) const override;
  void collect(std::vector<ParamSlot>& out, std::size_t layer_index) const override;
  std::unique_ptr<Layer> clone() const override;

  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

class Conv2d final : public Layer {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
         std::size_t padding);

  std::string_view kind() const override { return "conv2d"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override;
  std::uint64_t forward_flops(const Shape& in) const override;
  void collect(std::vector<ParamSlot>& out, std::size_t layer_index) const override;
  std::unique_ptr<Layer> clone() const override;

  Tensor weight;  // [out, in, k, k]
  std::size_t stride;
  std::size_t padding;
};

/// Batch normalization over axis 1 of [N,C] or [N,C,H,W] inputs.
///
/// Running statistics follow running = (1 - momentum) * running +
/// momentum * batch, with the unbiased batch variance.
class BatchNorm final : public Layer {
 public:
  // Cost per element: subtract, scale, multiply, shift.
  static constexpr std::uint64_t flops_per_element = 4;

  BatchNorm(std::size_t channels, double momentum, double eps);

  std::string_view kind() const override { return "batchnorm"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override { return in; }
  std::uint64_t forward_flops(const Shape& in) const override;
  void collect(std::vector<ParamSlot>& out, std::size_t layer_index) const override;
  std::unique_ptr<Layer> clone() const override;

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum;
  double eps;
};

class ReLU final : public Layer {
 public:
  static constexpr std::uint64_t flops_per_element = 1;

  std::string_view kind() const override { return "relu"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override { return in; }
  std::uint64_t forward_flops(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }
};

class GlobalAvgPool final : public Layer {
 public:
  std::string_view kind() const override { return "gap"; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override;
  std::uint64_t forward_flops(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
};

class SelectionMask {
 public:
  SelectionMask() = default;
  SelectionMask(std::initializer_list<std::string_view> groups);
  explicit SelectionMask(std::set<std::string> groups) : groups_(std::move(groups)) {}

  bool contains(std::string_view group) const { return groups_.count(std::string(group)) > 0; }
  bool empty() const { return groups_.empty(); }
  std::size_t size() const { return groups_.size(); }
  void insert(std::string group) { groups_.insert(std::move(group)); }
  const std::set<std::string>& groups() const { return groups_; }
  std::string to_string() const;  // comma-separated

  friend bool operator==(const SelectionMask&, const SelectionMask&) = default;

 private:
  std::set<std::string> groups_;
};

SelectionMask parse_mask(std::string_view comma_separated);

/// Per-layer vector within one group (all of the layer's slots in that group,
/// concatenated in slot order).
struct LayerVector {
  std::size_t layer_index = 0;
  std::vector<double> values;
  friend bool operator==(const LayerVector&, const LayerVector&) = default;
};

struct GroupVectors {
  std::string group_id;
  std::vector<LayerVector> layers;
  std::vector<double> flat() const;
  std::size_t param_count() const;
  friend bool operator==(const GroupVectors&, const GroupVectors&) = default;
};

/// Parameter copies taken at the end of epoch `epoch` (1-based) of task
/// `task` (1-based). Groups appear in model order.
struct ModelSnapshot {
  int task = 0;
  int epoch = 0;
  std::vector<GroupVectors> groups;

  const GroupVectors& group(std::string_view id) const;
  friend bool operator==(const ModelSnapshot&, const ModelSnapshot&) = default;
};

class Model {
 public:
  Model(ModelSpec spec, std::vector<std::unique_ptr<Layer>> layers);
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  std::size_t num_layers() const { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }

  /// batch: [B, input_shape...]; returns logits [B, num_classes].
  Tensor forward(const Tensor& batch, Mode mode);
  /// Convenience: wraps flat row-major samples into a batch tensor.
  Tensor forward(std::span<const double> samples, std::size_t batch, Mode mode);

  std::vector<ParamSlot> slots() const;
  std::vector<ParameterGroup> groups() const;
  std::size_t parameter_count() const;

  void zero_grad();
  /// Plain SGD on trainable slots whose group is in `mask`; other slots are
  /// not read or written. Gradients are cleared afterwards.
  void sgd_step(double lr, const SelectionMask& mask);
  void sgd_step(double lr);

  SelectionMask all_groups() const;

  ModelSnapshot snapshot(int task, int epoch) const;

  /// Per-layer FLOPs for a batch of `batch` samples. Backward is counted as
  /// twice forward for every layer.
  std::vector<LayerFlops> layer_flops(std::size_t batch = 1) const;
  std::uint64_t forward_flops(std::size_t batch) const;

 private:
  ModelSpec spec_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

Model build_model(const ModelSpec& spec, Rng& rng);
/// All weights and biases zero; BN at identity (gamma 1, beta 0, mean 0, var 1).
Model build_zero_model(const ModelSpec& spec);

/// Fraction of parameters (trainable and statistical) held by `mask`.
/// Throws UnknownGroup when the mask names a group not in `groups`.
double group_fraction(const std::vector<ParameterGroup>& groups, const SelectionMask& mask);

}  // namespace forgetlab
