#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "forgetlab/rng.hpp"
#include "forgetlab/tensor.hpp"

namespace testing {

using forgetlab::Rng;
using forgetlab::Shape;
using forgetlab::Tensor;

inline Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(forgetlab::shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero so ReLU kinks stay out of the stencil.
inline Tensor random_nonzero(Rng& rng, Shape shape, double min_abs = 0.05) {
  Tensor t = random_tensor(rng, std::move(shape));
  for (auto& x : t.mutable_data()) {
    while (std::abs(x) < min_abs) x = rng.normal();
  }
  return t;
}

inline Shape random_shape(Rng& rng, std::size_t rank, std::size_t lo = 1, std::size_t hi = 4) {
  Shape s(rank);
  for (auto& d : s) d = static_cast<std::size_t>(rng.uniform_int(static_cast<int64_t>(lo), static_cast<int64_t>(hi)));
  return s;
}

// |a - n| / max(|a|, |n|, floor)
inline double rel_error(double a, double n, double floor = 1e-3) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Largest relative error between backward() and central differences of
// L = sum(f(inputs) * R) for a random projection R, over every input element.
inline double gradcheck(const OpFn& f, std::vector<Tensor> inputs, Rng& rng, double h = 1e-6) {
  const Tensor out = f(inputs);
  std::vector<double> proj(out.numel());
  for (auto& r : proj) r = rng.normal();
  auto project = [&](const Tensor& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < proj.size(); ++i) s += y.data()[i] * proj[i];
    return s;
  };
  for (auto& t : inputs) t.clear_grad();
  forgetlab::sum(forgetlab::mul(out, Tensor(out.shape(), proj))).backward();

  double worst = 0.0;
  forgetlab::NoGradGuard guard;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    for (std::size_t j = 0; j < t.numel(); ++j) {
      const double orig = t.data()[j];
      t.mutable_data()[j] = orig + h;
      const double up = project(f(inputs));
      t.mutable_data()[j] = orig - h;
      const double down = project(f(inputs));
      t.mutable_data()[j] = orig;
      worst = std::max(worst, rel_error(analytic[j], (up - down) / (2 * h)));
    }
  }
  return worst;
}

}  // namespace testing
