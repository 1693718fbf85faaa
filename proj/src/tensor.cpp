#include "forgetlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include <fmt/format.h>

#include "forgetlab/error.hpp"

namespace forgetlab {
namespace {

thread_local bool g_grad_enabled = true;

std::string shape_str(const Shape& s) { return fmt::format("[{}]", fmt::join(s, ",")); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::shape_mismatch,
         fmt::format("{}: {} vs {}", op, shape_str(a.shape()), shape_str(b.shape())));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    fail(ErrorCode::shape_mismatch,
         fmt::format("{}: expected rank {}, got {}", op, rank, shape_str(t.shape())));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void check_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) fail(ErrorCode::numeric, fmt::format("{}: non-finite output", op));
  }
}

Tensor::Tensor() : Tensor(Shape{0}, {}) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape_numel(shape) != data.size()) {
    fail(ErrorCode::shape_mismatch,
         fmt::format("tensor: shape {} holds {} values, got {}", shape_str(shape),
                     shape_numel(shape), data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor(Shape{}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) fail(ErrorCode::not_scalar, fmt::format("item: tensor has {} elements", numel()));
  return impl_->data[0];
}

std::span<const double> Tensor::grad() const {
  if (!impl_->grad) return {};
  return *impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, false); }

double* grad_sink(const Tensor& t) {
  auto& impl = *t.impl();
  if (!impl.requires_grad) return nullptr;
  if (!impl.grad) impl.grad.emplace(impl.data.size(), 0.0);
  return impl.grad->data();
}

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(std::span<const double>)> backward) {
  check_finite(data, "op");
  Tensor out(std::move(shape), std::move(data), false);
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<detail::Node>();
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::move(backward);
  out.impl_->node = std::move(node);
  out.impl_->requires_grad = true;
  return out;
}

void Tensor::backward() const {
  if (numel() != 1) fail(ErrorCode::not_scalar, fmt::format("backward: loss has {} elements", numel()));
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    if (cur->node && next < cur->node->inputs.size()) {
      detail::TensorImpl* child = cur->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(cur);
    stack.pop_back();
  }

  for (auto* t : order) {
    if (t->node) t->grad.emplace(t->data.size(), 0.0);
  }
  if (!impl_->grad) impl_->grad.emplace(1, 0.0);
  (*impl_->grad)[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* t = *it;
    if (!t->node) continue;
    t->node->backward(*t->grad);
  }
  for (auto* t : order) {
    if (t->node && t != impl_.get()) t->grad.reset();
  }
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (double* gb = grad_sink(b)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (double* gb = grad_sink(b)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
    if (double* gb = grad_sink(b)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result(a.shape(), std::move(out), {a}, [a, factor](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Tensor sum(const Tensor& a) {
  const double total = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return make_result(Shape{}, {total}, {a}, [a](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) fail(ErrorCode::shape_mismatch, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  return make_result(x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
    if (double* gx = grad_sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x.data()[i] > 0.0) gx[i] += g[i];
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    fail(ErrorCode::shape_mismatch,
         fmt::format("reshape: {} to {}", shape_str(x.shape()), shape_str(shape)));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [x](std::span<const double> g) {
    if (double* gx = grad_sink(x)) for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail(ErrorCode::shape_mismatch,
         fmt::format("matmul: inner dims {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
  }
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t r = 0; r < k; ++r) {
      const double av = pa[i * k + r];
      if (av == 0.0) continue;
      const double* brow = pb + r * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result(Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    if (double* ga = grad_sink(a)) {
      // dA = G · Bᵀ
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t r = 0; r < k; ++r) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[r * n + j];
          ga[i * k + r] += acc;
        }
      }
    }
    if (double* gb = grad_sink(b)) {
      // dB = Aᵀ · G
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t r = 0; r < k; ++r) {
          const double av = pa[i * k + r];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[r * n + j] += av * g[i * n + j];
        }
      }
    }
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    fail(ErrorCode::shape_mismatch,
         fmt::format("add_row_bias: {} + {}", shape_str(x.shape()), shape_str(bias.shape())));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.data()[j];
  return make_result(x.shape(), std::move(out), {x, bias}, [x, bias, m, n](std::span<const double> g) {
    if (double* gx = grad_sink(x)) for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (double* gb = grad_sink(bias)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    fail(ErrorCode::shape_mismatch,
         fmt::format("concat_rows: {} and {}", shape_str(a.shape()), shape_str(b.shape())));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return make_result(std::move(shape), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g[i];
    if (double* gb = grad_sink(b)) {
      for (std::size_t i = 0; i < b.numel(); ++i) gb[i] += g[a.numel() + i];
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.dim(0)) {
    fail(ErrorCode::shape_mismatch,
         fmt::format("slice_rows: [{}, {}) of {}", begin, end, shape_str(x.shape())));
  }
  const std::size_t row = x.dim(0) == 0 ? 0 : x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> out(x.data().begin() + begin * row, x.data().begin() + end * row);
  return make_result(std::move(shape), std::move(out), {x}, [x, begin, row](std::span<const double> g) {
    if (double* gx = grad_sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[begin * row + i] += g[i];
    }
  });
}

// ---- convolution / pooling -------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t padding) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  if (stride == 0) fail(ErrorCode::shape_mismatch, "conv2d: stride 0");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
  if (weight.dim(1) != C) {
    fail(ErrorCode::shape_mismatch,
         fmt::format("conv2d: input {} vs weight {}", shape_str(x.shape()), shape_str(weight.shape())));
  }
  if (H + 2 * padding < KH || W + 2 * padding < KW) {
    fail(ErrorCode::shape_mismatch, "conv2d: kernel larger than padded input");
  }
  const std::size_t OH = (H + 2 * padding - KH) / stride + 1;
  const std::size_t OW = (W + 2 * padding - KW) / stride + 1;

  // Visits every (output, input, weight) triple that touches a valid input pixel.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t oh = 0; oh < OH; ++oh)
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const std::size_t out_idx = ((n * O + o) * OH + oh) * OW + ow;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t kh = 0; kh < KH; ++kh) {
                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + kh) -
                                          static_cast<std::ptrdiff_t>(padding);
                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kw = 0; kw < KW; ++kw) {
                  const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kw) -
                                            static_cast<std::ptrdiff_t>(padding);
                  if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                  const std::size_t in_idx = ((n * C + c) * H + static_cast<std::size_t>(ih)) * W +
                                             static_cast<std::size_t>(iw);
                  const std::size_t w_idx = ((o * C + c) * KH + kh) * KW + kw;
                  fn(out_idx, in_idx, w_idx);
                }
              }
          }
  };

  std::vector<double> out(N * O * OH * OW, 0.0);
  const double* px = x.data().data();
  const double* pw = weight.data().data();
  for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) { out[oi] += px[ii] * pw[wi]; });

  return make_result(Shape{N, O, OH, OW}, std::move(out), {x, weight},
                     [x, weight, for_each_tap](std::span<const double> g) {
                       double* gx = grad_sink(x);
                       double* gw = grad_sink(weight);
                       const double* px = x.data().data();
                       const double* pw = weight.data().data();
                       if (gx && gw) {
                         for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) {
                           gx[ii] += g[oi] * pw[wi];
                           gw[wi] += g[oi] * px[ii];
                         });
                       } else if (gx) {
                         for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) { gx[ii] += g[oi] * pw[wi]; });
                       } else if (gw) {
                         for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) { gw[wi] += g[oi] * px[ii]; });
                       }
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) fail(ErrorCode::shape_mismatch, "global_avg_pool: empty spatial extent");
  std::vector<double> out(N * C, 0.0);
  for (std::size_t i = 0; i < N * C; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < HW; ++p) acc += x.data()[i * HW + p];
    out[i] = acc / static_cast<double>(HW);
  }
  return make_result(Shape{N, C}, std::move(out), {x}, [x, N, C, HW](std::span<const double> g) {
    if (double* gx = grad_sink(x)) {
      const double inv = 1.0 / static_cast<double>(HW);
      for (std::size_t i = 0; i < N * C; ++i)
        for (std::size_t p = 0; p < HW; ++p) gx[i * HW + p] += g[i] * inv;
    }
  });
}

// ---- batch normalization ---------------------------------------------------

namespace {

struct BnLayout {
  std::size_t batch, channels, spatial;
  std::size_t index(std::size_t n, std::size_t c, std::size_t p) const {
    return (n * channels + c) * spatial + p;
  }
};

BnLayout bn_layout(const Tensor& x, const Tensor& gamma, const Tensor& beta, const char* op) {
  if (x.rank() != 2 && x.rank() != 4) {
    fail(ErrorCode::shape_mismatch, fmt::format("{}: expected [N,C] or [N,C,H,W], got {}", op,
                                                shape_str(x.shape())));
  }
  BnLayout l{x.dim(0), x.dim(1), x.rank() == 4 ? x.dim(2) * x.dim(3) : 1};
  if (gamma.shape() != Shape{l.channels} || beta.shape() != Shape{l.channels}) {
    fail(ErrorCode::shape_mismatch, fmt::format("{}: affine params must be [{}]", op, l.channels));
  }
  return l;
}

}  // namespace

BatchNormTrainResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                      double eps) {
  const BnLayout l = bn_layout(x, gamma, beta, "batch_norm_train");
  const std::size_t count = l.batch * l.spatial;
  if (count == 0) fail(ErrorCode::shape_mismatch, "batch_norm_train: empty batch");

  std::vector<double> mu(l.channels, 0.0), var(l.channels, 0.0), inv_std(l.channels);
  for (std::size_t c = 0; c < l.channels; ++c) {
    double acc = 0.0;
    for (std::size_t n = 0; n < l.batch; ++n)
      for (std::size_t p = 0; p < l.spatial; ++p) acc += x.data()[l.index(n, c, p)];
    mu[c] = acc / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t n = 0; n < l.batch; ++n)
      for (std::size_t p = 0; p < l.spatial; ++p) {
        const double d = x.data()[l.index(n, c, p)] - mu[c];
        sq += d * d;
      }
    var[c] = sq / static_cast<double>(count);
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  }

  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t n = 0; n < l.batch; ++n)
    for (std::size_t c = 0; c < l.channels; ++c)
      for (std::size_t p = 0; p < l.spatial; ++p) {
        const std::size_t i = l.index(n, c, p);
        xhat[i] = (x.data()[i] - mu[c]) * inv_std[c];
        out[i] = gamma.data()[c] * xhat[i] + beta.data()[c];
      }

  Tensor y = make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, l, count, xhat = std::move(xhat), inv_std](std::span<const double> g) {
        double* gx = grad_sink(x);
        double* gg = grad_sink(gamma);
        double* gb = grad_sink(beta);
        for (std::size_t c = 0; c < l.channels; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < l.batch; ++n)
            for (std::size_t p = 0; p < l.spatial; ++p) {
              const std::size_t i = l.index(n, c, p);
              sum_g += g[i];
              sum_gx += g[i] * xhat[i];
            }
          if (gg) gg[c] += sum_gx;
          if (gb) gb[c] += sum_g;
          if (gx) {
            const double m = static_cast<double>(count);
            const double k = gamma.data()[c] * inv_std[c] / m;
            for (std::size_t n = 0; n < l.batch; ++n)
              for (std::size_t p = 0; p < l.spatial; ++p) {
                const std::size_t i = l.index(n, c, p);
                gx[i] += k * (m * g[i] - sum_g - xhat[i] * sum_gx);
              }
          }
        }
      });
  return {std::move(y), std::move(mu), std::move(var), count};
}

Tensor batch_norm_fixed(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        std::span<const double> mean_in, std::span<const double> var_in, double eps) {
  const BnLayout l = bn_layout(x, gamma, beta, "batch_norm_fixed");
  if (mean_in.size() != l.channels || var_in.size() != l.channels) {
    fail(ErrorCode::shape_mismatch, "batch_norm_fixed: statistics length mismatch");
  }
  std::vector<double> mu(mean_in.begin(), mean_in.end());
  std::vector<double> inv_std(l.channels);
  for (std::size_t c = 0; c < l.channels; ++c) inv_std[c] = 1.0 / std::sqrt(var_in[c] + eps);

  std::vector<double> out(x.numel());
  for (std::size_t n = 0; n < l.batch; ++n)
    for (std::size_t c = 0; c < l.channels; ++c)
      for (std::size_t p = 0; p < l.spatial; ++p) {
        const std::size_t i = l.index(n, c, p);
        out[i] = gamma.data()[c] * (x.data()[i] - mu[c]) * inv_std[c] + beta.data()[c];
      }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [x, gamma, beta, l, mu, inv_std](std::span<const double> g) {
                       double* gx = grad_sink(x);
                       double* gg = grad_sink(gamma);
                       double* gb = grad_sink(beta);
                       for (std::size_t n = 0; n < l.batch; ++n)
                         for (std::size_t c = 0; c < l.channels; ++c)
                           for (std::size_t p = 0; p < l.spatial; ++p) {
                             const std::size_t i = l.index(n, c, p);
                             if (gx) gx[i] += g[i] * gamma.data()[c] * inv_std[c];
                             if (gg) gg[c] += g[i] * (x.data()[i] - mu[c]) * inv_std[c];
                             if (gb) gb[c] += g[i];
                           }
                     });
}

// ---- losses ----------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B) {
    fail(ErrorCode::shape_mismatch, fmt::format("cross_entropy: {} labels for {} rows", labels.size(), B));
  }
  if (B == 0) fail(ErrorCode::shape_mismatch, "cross_entropy: empty batch");
  std::vector<double> probs(B * C);
  double loss = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C) {
      fail(ErrorCode::label_out_of_range, fmt::format("cross_entropy: label {} with {} classes", labels[i], C));
    }
    const double* row = logits.data().data() + i * C;
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t j = 0; j < C; ++j) z += std::exp(row[j] - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < C; ++j) probs[i * C + j] = std::exp(row[j] - log_z);
    loss += log_z - row[labels[i]];
  }
  loss /= static_cast<double>(B);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result(Shape{}, {loss}, {logits},
                     [logits, probs = std::move(probs), lab = std::move(lab), B, C](std::span<const double> g) {
                       if (double* gl = grad_sink(logits)) {
                         const double s = g[0] / static_cast<double>(B);
                         for (std::size_t i = 0; i < B; ++i)
                           for (std::size_t j = 0; j < C; ++j) {
                             const double onehot = static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0;
                             gl[i * C + j] += s * (probs[i * C + j] - onehot);
                           }
                       }
                     });
}

Tensor mse(const Tensor& pred, std::span<const double> target) {
  if (target.size() != pred.numel()) {
    fail(ErrorCode::shape_mismatch, fmt::format("mse: {} targets for {} predictions", target.size(), pred.numel()));
  }
  if (pred.numel() == 0) fail(ErrorCode::shape_mismatch, "mse: empty input");
  const double inv = 1.0 / static_cast<double>(pred.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = pred.data()[i] - target[i];
    acc += d * d;
  }
  std::vector<double> tgt(target.begin(), target.end());
  return make_result(Shape{}, {acc * inv}, {pred}, [pred, tgt = std::move(tgt), inv](std::span<const double> g) {
    if (double* gp = grad_sink(pred)) {
      for (std::size_t i = 0; i < tgt.size(); ++i) gp[i] += g[0] * 2.0 * inv * (pred.data()[i] - tgt[i]);
    }
  });
}

}  // namespace forgetlab
