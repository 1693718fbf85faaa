#include <doctest.h>

#include <cmath>

#include "forgetlab/error.hpp"
#include "forgetlab/tensor.hpp"
#include "support.hpp"

using namespace forgetlab;
using testing::gradcheck;
using testing::random_nonzero;
using testing::random_shape;
using testing::random_tensor;

namespace {

constexpr int trials = 50;
constexpr double tol = 1e-4;

template <class Make>
void check_op(const char* name, std::uint64_t seed, Make make) {
  Rng rng(seed);
  double worst = 0.0;
  for (int i = 0; i < trials; ++i) {
    auto [fn, inputs] = make(rng);
    worst = std::max(worst, gradcheck(fn, inputs, rng));
  }
  INFO(name << " worst rel error " << worst);
  CHECK(worst < tol);
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::bad_format;
}

}  // namespace

TEST_CASE("elementwise and reduction gradients match finite differences") {
  check_op("add", 1, [](Rng& r) {
    auto s = random_shape(r, 2);
    return std::pair{testing::OpFn([](auto& in) { return add(in[0], in[1]); }),
                     std::vector{random_tensor(r, s), random_tensor(r, s)}};
  });
  check_op("sub", 2, [](Rng& r) {
    auto s = random_shape(r, 3);
    return std::pair{testing::OpFn([](auto& in) { return sub(in[0], in[1]); }),
                     std::vector{random_tensor(r, s), random_tensor(r, s)}};
  });
  check_op("mul", 3, [](Rng& r) {
    auto s = random_shape(r, 2);
    return std::pair{testing::OpFn([](auto& in) { return mul(in[0], in[1]); }),
                     std::vector{random_tensor(r, s), random_tensor(r, s)}};
  });
  check_op("scale", 4, [](Rng& r) {
    const double f = r.normal();
    return std::pair{testing::OpFn([f](auto& in) { return scale(in[0], f); }),
                     std::vector{random_tensor(r, random_shape(r, 2))}};
  });
  check_op("sum", 5, [](Rng& r) {
    return std::pair{testing::OpFn([](auto& in) { return sum(in[0]); }), std::vector{random_tensor(r, random_shape(r, 3))}};
  });
  check_op("mean", 6, [](Rng& r) {
    return std::pair{testing::OpFn([](auto& in) { return mean(in[0]); }), std::vector{random_tensor(r, random_shape(r, 2))}};
  });
  check_op("relu", 7, [](Rng& r) {
    return std::pair{testing::OpFn([](auto& in) { return relu(in[0]); }), std::vector{random_nonzero(r, random_shape(r, 2))}};
  });
}

TEST_CASE("matrix and shape op gradients match finite differences") {
  check_op("matmul", 11, [](Rng& r) {
    auto s = random_shape(r, 3);
    return std::pair{testing::OpFn([](auto& in) { return matmul(in[0], in[1]); }),
                     std::vector{random_tensor(r, {s[0], s[1]}), random_tensor(r, {s[1], s[2]})}};
  });
  check_op("add_row_bias", 12, [](Rng& r) {
    auto s = random_shape(r, 2);
    return std::pair{testing::OpFn([](auto& in) { return add_row_bias(in[0], in[1]); }),
                     std::vector{random_tensor(r, s), random_tensor(r, {s[1]})}};
  });
  check_op("reshape", 13, [](Rng& r) {
    auto s = random_shape(r, 2);
    return std::pair{testing::OpFn([s](auto& in) { return reshape(in[0], {s[0] * s[1]}); }),
                     std::vector{random_tensor(r, s)}};
  });
  check_op("concat_rows", 14, [](Rng& r) {
    auto s = random_shape(r, 3);
    return std::pair{testing::OpFn([](auto& in) { return concat_rows(in[0], in[1]); }),
                     std::vector{random_tensor(r, {s[0], s[2]}), random_tensor(r, {s[1], s[2]})}};
  });
  check_op("slice_rows", 15, [](Rng& r) {
    auto s = random_shape(r, 2, 2, 4);
    const auto b = static_cast<std::size_t>(r.uniform_int(0, static_cast<int64_t>(s[0]) - 1));
    return std::pair{testing::OpFn([b, s](auto& in) { return slice_rows(in[0], b, s[0]); }),
                     std::vector{random_tensor(r, s)}};
  });
}

TEST_CASE("convolution, pooling and batch norm gradients match finite differences") {
  check_op("conv2d", 21, [](Rng& r) {
    const auto n = static_cast<std::size_t>(r.uniform_int(1, 2));
    const auto c = static_cast<std::size_t>(r.uniform_int(1, 3));
    const auto o = static_cast<std::size_t>(r.uniform_int(1, 3));
    const auto hw = static_cast<std::size_t>(r.uniform_int(3, 4));
    const auto k = static_cast<std::size_t>(r.uniform_int(1, 3));
    const auto stride = static_cast<std::size_t>(r.uniform_int(1, 2));
    const auto pad = static_cast<std::size_t>(r.uniform_int(0, 1));
    return std::pair{testing::OpFn([=](auto& in) { return conv2d(in[0], in[1], stride, pad); }),
                     std::vector{random_tensor(r, {n, c, hw, hw}), random_tensor(r, {o, c, k, k})}};
  });
  check_op("global_avg_pool", 22, [](Rng& r) {
    return std::pair{testing::OpFn([](auto& in) { return global_avg_pool(in[0]); }),
                     std::vector{random_tensor(r, random_shape(r, 4))}};
  });
  check_op("batch_norm_train 2d", 23, [](Rng& r) {
    const auto n = static_cast<std::size_t>(r.uniform_int(2, 4));
    const auto c = static_cast<std::size_t>(r.uniform_int(1, 4));
    return std::pair{testing::OpFn([](auto& in) { return batch_norm_train(in[0], in[1], in[2], 1e-5).output; }),
                     std::vector{random_tensor(r, {n, c}), random_tensor(r, {c}), random_tensor(r, {c})}};
  });
  check_op("batch_norm_train 4d", 24, [](Rng& r) {
    auto s = random_shape(r, 4, 1, 3);
    s[0] = 2;
    return std::pair{testing::OpFn([](auto& in) { return batch_norm_train(in[0], in[1], in[2], 1e-5).output; }),
                     std::vector{random_tensor(r, s), random_tensor(r, {s[1]}), random_tensor(r, {s[1]})}};
  });
  check_op("batch_norm_fixed", 25, [](Rng& r) {
    auto s = random_shape(r, 2);
    std::vector<double> m(s[1]), v(s[1]);
    for (auto& x : m) x = r.normal();
    for (auto& x : v) x = 0.5 + r.uniform();
    return std::pair{testing::OpFn([m, v](auto& in) { return batch_norm_fixed(in[0], in[1], in[2], m, v, 1e-5); }),
                     std::vector{random_tensor(r, s), random_tensor(r, {s[1]}), random_tensor(r, {s[1]})}};
  });
}

TEST_CASE("loss gradients match finite differences") {
  check_op("cross_entropy", 31, [](Rng& r) {
    auto s = random_shape(r, 2, 1, 4);
    s[1] += 1;
    std::vector<int> labels(s[0]);
    for (auto& l : labels) l = static_cast<int>(r.uniform_int(0, static_cast<int64_t>(s[1]) - 1));
    return std::pair{testing::OpFn([labels](auto& in) { return cross_entropy(in[0], labels); }),
                     std::vector{random_tensor(r, s, true, 2.0)}};
  });
  check_op("mse", 32, [](Rng& r) {
    auto s = random_shape(r, 2);
    std::vector<double> target(s[0] * s[1]);
    for (auto& t : target) t = r.normal();
    return std::pair{testing::OpFn([target](auto& in) { return mse(in[0], target); }), std::vector{random_tensor(r, s)}};
  });
}

TEST_CASE("cross entropy closed forms") {
  const std::vector<int> label0{0};
  CHECK(cross_entropy(Tensor({1, 2}, {2.0, 0.0}), label0).item() ==
        doctest::Approx(-std::log(std::exp(2.0) / (std::exp(2.0) + 1.0))).epsilon(1e-12));
  CHECK(cross_entropy(Tensor({1, 2}, {2.0, 0.0}), label0).item() == doctest::Approx(0.126928011).epsilon(1e-8));
  for (std::size_t C : {2, 5, 10}) {
    CHECK(cross_entropy(Tensor::zeros({3, C}), std::vector<int>{0, 1, 1}).item() ==
          doctest::Approx(std::log(static_cast<double>(C))).epsilon(1e-12));
  }
  CHECK(cross_entropy(Tensor({1, 2}, {500.0, 0.0}), label0).item() < 1e-12);
  CHECK(code_of([] { cross_entropy(Tensor::zeros({1, 2}), std::vector<int>{2}); }) == ErrorCode::label_out_of_range);
  CHECK(code_of([] { cross_entropy(Tensor::zeros({1, 2}), std::vector<int>{-1}); }) == ErrorCode::label_out_of_range);
}

TEST_CASE("shape errors and scalar access") {
  CHECK(code_of([] { matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})); }) == ErrorCode::shape_mismatch);
  CHECK(code_of([] { add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})); }) == ErrorCode::shape_mismatch);
  CHECK(code_of([] { (void)Tensor::zeros({2}).item(); }) == ErrorCode::not_scalar);
  CHECK(code_of([] { Tensor::zeros({2}).backward(); }) == ErrorCode::not_scalar);
  CHECK(code_of([] { mse(Tensor::zeros({2, 2}), std::vector<double>{1.0}); }) == ErrorCode::shape_mismatch);
}

TEST_CASE("non-finite results raise NumericError") {
  Tensor big({1}, {1e308}, true);
  CHECK(code_of([&] { scale(big, 10.0); }) == ErrorCode::numeric);
  CHECK(code_of([] { add(Tensor({1}, {std::nan("")}), Tensor({1}, {0.0})); }) == ErrorCode::numeric);
}

TEST_CASE("leaf gradients accumulate across backward calls; no graph under NoGradGuard") {
  Tensor x({2}, {1.0, 2.0}, true);
  sum(mul(x, x)).backward();
  sum(mul(x, x)).backward();
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  CHECK(x.grad()[1] == doctest::Approx(8.0));
  {
    NoGradGuard guard;
    Tensor y = mul(x, x);
    CHECK(y.is_leaf());
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(grad_enabled());
}

TEST_CASE("batch_norm_train returns biased batch statistics") {
  Tensor x({3, 1}, {1.0, 2.0, 3.0});
  const auto r = batch_norm_train(x, Tensor::full({1}, 1.0), Tensor::zeros({1}), 0.0);
  CHECK(r.batch_mean[0] == doctest::Approx(2.0));
  CHECK(r.batch_var[0] == doctest::Approx(2.0 / 3.0));
  CHECK(r.count == 3);
  CHECK(r.output.data()[0] == doctest::Approx(-1.0 / std::sqrt(2.0 / 3.0)));
}
