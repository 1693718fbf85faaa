#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace forgetlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

namespace detail {

struct TensorImpl;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads the output gradient and accumulates into the inputs' gradients.
  std::function<void(std::span<const double> grad_out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;
  std::shared_ptr<Node> node;
};

}  // namespace detail

/// Dense row-major tensor of doubles with reverse-mode gradients.
///
/// Copies share storage (handle semantics, like most autograd libraries);
/// use clone() for an independent copy. A tensor produced by an operation on
/// inputs that require gradients keeps a reference to its inputs until it is
/// destroyed.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool is_leaf() const { return impl_->node == nullptr; }

  bool has_grad() const { return impl_->grad.has_value(); }
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad() { impl_->grad.reset(); }

  /// Accumulates d(this)/d(leaf) into every reachable leaf that requires grad.
  void backward() const;

  /// Independent copy of the data with no graph attached.
  Tensor clone() const;
  /// Shares nothing with the graph; requires_grad is false.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(std::span<const double>)>);

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Builds an op output; records `backward` only when grad mode is on and some
// input requires grad. Exposed for layers defined outside tensor.cpp.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(std::span<const double>)> backward);

bool grad_enabled();

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Gradient accumulation helper for op implementations: grad buffer of an
// input, allocated on first use. Returns nullptr when t needs no gradient.
double* grad_sink(const Tensor& t);

void check_finite(std::span<const double> values, const char* op);

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// x[m×n] + bias[n] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);

/// x[N,C,H,W] * w[O,C,kh,kw], zero padding, no bias.
Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t padding);
/// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);

struct BatchNormTrainResult {
  Tensor output;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased (divides by count)
  std::size_t count = 0;          // elements reduced per channel
};

/// Normalizes with batch statistics over every axis except axis 1.
/// Accepts [N,C] or [N,C,H,W].
BatchNormTrainResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                      double eps);
/// Normalizes with fixed statistics; differentiable in x, gamma and beta.
Tensor batch_norm_fixed(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        std::span<const double> mean, std::span<const double> var, double eps);

/// Mean over rows of -log softmax(logits)[label]. Throws LabelOutOfRange.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean over all elements of (pred - target)^2; target carries no gradient.
Tensor mse(const Tensor& pred, std::span<const double> target);

}  // namespace forgetlab
