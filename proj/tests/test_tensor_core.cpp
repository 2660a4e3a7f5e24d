#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "geossl/gradcheck.hpp"
#include "geossl/tensor.hpp"

using namespace geossl;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), v);
}

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(TensorForward, L2NormalizeThreeFourFive) {
  const Tensor y = l2_normalize(Tensor::from({1, 2}, {3.0, 4.0}), 1);
  EXPECT_NEAR(y[0], 0.6, 1e-12);
  EXPECT_NEAR(y[1], 0.8, 1e-12);
}

TEST(TensorForward, SoftmaxOfZerosIsUniform) {
  const Tensor y = softmax(Tensor::from({1, 2}, {0.0, 0.0}), 1);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(TensorForward, IdentityConvKeepsImage) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({2, 3, 5, 4}, rng);
  Tensor w = Tensor::zeros({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.mutable_data()[c * 3 + c] = 1.0;
  const Tensor y = conv2d(x, w, Conv2dOptions{1, 0});
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(TensorForward, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({1, 2, 6, 5}, rng);
  const Tensor w = random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = random_tensor({3}, rng);
  const Tensor y = conv2d(x, w, b, Conv2dOptions{2, 1});
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t oy = 0; oy < 3; ++oy)
      for (std::size_t ox = 0; ox < 3; ++ox) {
        double acc = b[o];
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const long iy = static_cast<long>(oy * 2 + ky) - 1, ix = static_cast<long>(ox * 2 + kx) - 1;
              if (iy < 0 || ix < 0 || iy >= 6 || ix >= 5) continue;
              acc += w[((o * 2 + c) * 3 + ky) * 3 + kx] * x[(c * 6 + static_cast<std::size_t>(iy)) * 5 +
                                                             static_cast<std::size_t>(ix)];
            }
        EXPECT_NEAR(y[(o * 3 + oy) * 3 + ox], acc, 1e-12);
      }
}

TEST(TensorForward, MatmulTransposeSliceConcat) {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1});
  EXPECT_EQ(to_vec(matmul(a, b)), (std::vector<double>{4, 5, 10, 11}));
  EXPECT_EQ(to_vec(transpose(a)), (std::vector<double>{1, 4, 2, 5, 3, 6}));
  EXPECT_EQ(to_vec(slice(a, 1, 1, 3)), (std::vector<double>{2, 3, 5, 6}));
  const Tensor c = concat({a, a}, 0);
  EXPECT_EQ(c.shape(), (Shape{4, 3}));
  EXPECT_EQ(to_vec(sum(a, 0)), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(to_vec(mean(a, 1)), (std::vector<double>{2, 5}));
  EXPECT_EQ(to_vec(avg_pool2d(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 6}), 2, 2)), (std::vector<double>{3}));
}

TEST(TensorForward, ShapeErrorsNameTheShapes) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 4});
  EXPECT_THROW(add(a, b), TensorError);
  EXPECT_THROW(matmul(a, a), TensorError);
  try {
    matmul(a, a);
  } catch (const TensorError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
  }
}

TEST(TensorBackward, SumGradIsOnes) {
  Tensor x = Tensor::from({3}, {1.0, -2.0, 5.0}, true);
  backward(sum(x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
}

TEST(TensorBackward, SquareGrad) {
  Tensor x = Tensor::from({1}, {2.0}, true);
  backward(sum(x * x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
}

TEST(TensorBackward, StopGradientBlocksBranch) {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor y = Tensor::from({2}, {3.0, 4.0}, true);
  backward(sum(stop_gradient(x) * y));
  const bool zero = !x.has_grad() || (x.grad()[0] == 0.0 && x.grad()[1] == 0.0);
  EXPECT_TRUE(zero);
  EXPECT_DOUBLE_EQ(y.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(y.grad()[1], 2.0);
}

TEST(TensorBackward, NonScalarLossRejected) {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(x * 2.0), TensorError);
}

TEST(GradCheck, SumOfSquares) {
  std::mt19937_64 rng(11);
  const Tensor x = random_tensor({8}, rng);
  EXPECT_LT(finite_diff_check([](const Tensor& t) { return sum(t * t); }, x, 1e-3), 1e-4);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  std::mt19937_64 rng(12);
  const Tensor x = random_tensor({5}, rng);
  EXPECT_EQ(finite_diff_check([](const Tensor&) { return Tensor::scalar(3.0); }, x, 1e-3), 0.0);
}

// Every differentiable op, composed into a scalar, over 10 seeds.
TEST(GradCheck, EveryOpOverTenSeeds) {
  using F = std::function<Tensor(const Tensor&)>;
  struct Case {
    const char* name;
    Shape shape;
    F f;
  };
  std::mt19937_64 wrng(99);
  const Tensor w22 = random_tensor({4, 3}, wrng);
  const Tensor cw = random_tensor({2, 2, 3, 3}, wrng);
  const Tensor cb = random_tensor({2}, wrng);
  const Tensor other = random_tensor({3, 4}, wrng, 0.5, 1.5);
  const std::vector<Case> cases{
      {"add/sub/mul/div", {3, 4}, [&](const Tensor& x) { return sum(((x + other) * x - other) / other); }},
      {"scalar ops", {3, 4}, [](const Tensor& x) { return sum((x * 3.0 + 1.5) / 2.0); }},
      {"relu", {3, 4}, [](const Tensor& x) { return sum(relu(x) * x); }},
      {"exp/log", {3, 4}, [&](const Tensor& x) { return sum(log(exp(x) + other)); }},
      {"matmul", {3, 4}, [&](const Tensor& x) { return sum(matmul(x, w22) * matmul(x, w22)); }},
      {"transpose/reshape", {3, 4},
       [&](const Tensor& x) { return sum(reshape(transpose(x), {2, 6}) * reshape(transpose(other), {2, 6})); }},
      {"slice/concat", {3, 4},
       [&](const Tensor& x) { return sum(slice(concat({slice(x, 0, 1, 3), slice(x, 0, 0, 1) * 2.0}, 0), 1, 1, 3) * 1.7); }},
      {"sum/mean axis", {3, 4}, [](const Tensor& x) { return sum(mean(x * x, 0)) + sum(sum(x, 1) * sum(x, 1)); }},
      {"softmax", {3, 4}, [&](const Tensor& x) { return sum(softmax(x, 1) * other); }},
      {"log_softmax", {3, 4}, [&](const Tensor& x) { return sum(log_softmax(x, 0) * other); }},
      {"l2_normalize", {3, 4}, [&](const Tensor& x) { return sum(l2_normalize(x, 1) * other); }},
      {"conv2d", {1, 2, 5, 5},
       [&](const Tensor& x) {
         const Tensor y = conv2d(x, cw, cb, Conv2dOptions{1, 1});
         return sum(y * y);
       }},
      {"conv2d stride", {1, 2, 6, 6},
       [&](const Tensor& x) {
         const Tensor y = conv2d(x, cw, cb, Conv2dOptions{2, 0});
         return sum(y * y);
       }},
      {"avg_pool", {1, 2, 4, 4},
       [](const Tensor& x) {
         const Tensor y = avg_pool2d(x, 2, 2);
         return sum(y * y);
       }},
      {"global_avg_pool", {2, 2, 3, 3},
       [](const Tensor& x) {
         const Tensor y = global_avg_pool(x);
         return sum(y * y);
       }},
  };
  for (const auto& c : cases)
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed);
      const Tensor x = random_tensor(c.shape, rng);
      EXPECT_LT(finite_diff_check(c.f, x, 1e-5), 1e-3) << c.name << " seed " << seed;
    }
}

TEST(TensorProperties, ForwardIsDeterministic) {
  std::mt19937_64 rng(5);
  const Tensor a = random_tensor({17, 33}, rng);
  const Tensor b = random_tensor({33, 9}, rng);
  EXPECT_EQ(to_vec(softmax(matmul(a, b), 1)), to_vec(softmax(matmul(a, b), 1)));
}

TEST(TensorProperties, BuffersAreAligned) {
  const Tensor t = Tensor::zeros({7, 3});
  EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.data().data()) % 64, 0u);
}

TEST(TensorProperties, GradientsAccumulateOverSharedInputs) {
  Tensor x = Tensor::from({2}, {1.0, 3.0}, true);
  backward(sum(x * 2.0) + sum(x * x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
}
