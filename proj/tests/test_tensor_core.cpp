#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

namespace samic {
namespace {

using testing::gradcheck;
using testing::project;
using testing::random_tensor;

constexpr double kOpTol = 1e-4;

// ---------------------------------------------------------------------------
// Worked examples

TEST(Conv2d, PointwiseIdentityKernelCopiesInput) {
  std::mt19937_64 rng(1);
  Tensord x = random_tensor({3, 5, 4}, rng);
  Tensord k({3, 3, 1, 1});
  for (Index c = 0; c < 3; ++c) k.mutable_value()[c * 3 + c] = 1.0;
  Tensord y = conv2d(x, k);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE((y.value() == x.value()).all());
}

TEST(Conv2d, AllOnesKernelSumsNineTapsInInterior) {
  Tensord x = Tensord::constant({1, 5, 5}, 0.7);
  Tensord k = Tensord::constant({1, 1, 3, 3}, 1.0);
  Tensord y = conv2d(x, k);
  EXPECT_NEAR(y.at({0, 2, 2}), 9 * 0.7, 1e-12);
  EXPECT_NEAR(y.at({0, 0, 0}), 4 * 0.7, 1e-12);  // zero padding at the corner
}

TEST(Conv2d, MaskedCenterTapIgnoresDeltaAtSamePixel) {
  Tensord x({1, 5, 5});
  x.mutable_value()[2 * 5 + 2] = 1.0;
  Tensord k = Tensord::constant({1, 1, 3, 3}, 1.0);
  std::vector<double> mask{1, 1, 1, 1, 0, 1, 1, 1, 1};
  Tensord y = conv2d(x, k, Tensord{}, 1, std::span<const double>(mask));
  EXPECT_EQ(y.at({0, 2, 2}), 0.0);
  EXPECT_EQ(y.at({0, 1, 2}), 1.0);
}

TEST(Conv2d, RejectsChannelMismatchAndEvenKernel) {
  Tensord x({2, 4, 4});
  EXPECT_THROW(conv2d(x, Tensord({1, 3, 3, 3})), std::invalid_argument);
  EXPECT_THROW(conv2d(x, Tensord({1, 2, 2, 2})), std::invalid_argument);
}

TEST(Conv2d, StrideTwoHalvesExtents) {
  Tensord x({2, 8, 6});
  Tensord y = conv2d(x, Tensord({3, 2, 3, 3}), Tensord{}, 2);
  EXPECT_EQ(y.shape(), (Shape{3, 4, 3}));
}

TEST(Silu, ScalarValues) {
  Tensord x = Tensord::from({3}, {0.0, 1.0, 40.0});
  Tensord y = silu(x);
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_NEAR(y.value()[1], 0.731058578630005, 1e-12);
  EXPECT_NEAR(y.value()[2], 40.0, 1e-12);
}

TEST(Softmax, SymmetricAndScalarOracle) {
  Tensord a = softmax(Tensord::from({1, 2}, {0.0, 0.0}), 1);
  EXPECT_DOUBLE_EQ(a.value()[0], 0.5);
  Tensord b = softmax(Tensord::from({1, 2}, {1.0, 0.0}), 1);
  EXPECT_NEAR(b.value()[0], std::exp(1.0) / (std::exp(1.0) + 1), 1e-12);
  EXPECT_NEAR(b.value()[1], 1 / (std::exp(1.0) + 1), 1e-12);
  Tensord c = softmax(Tensord::from({1, 2}, {1000.0, 0.0}), 1);
  EXPECT_DOUBLE_EQ(c.value()[0], 1.0);
  EXPECT_DOUBLE_EQ(c.value()[1], 0.0);
}

TEST(Softmax, RowsSumToOneForLargeInputs) {
  std::mt19937_64 rng(3);
  Tensord x = random_tensor({7, 16}, rng, -1000.0, 1000.0);
  for (int axis : {0, 1}) {
    Tensord y = softmax(x, axis);
    Tensord s = sum_axis(y, axis);
    for (Index i = 0; i < s.size(); ++i) EXPECT_NEAR(s.value()[i], 1.0, 1e-6);
    EXPECT_TRUE((y.value() >= 0.0).all() && (y.value() <= 1.0).all());
  }
}

TEST(GatherRows, DefinitionAndRoundTrip) {
  Tensord x = Tensord::from({3, 2}, {0, 1, 10, 11, 20, 21});
  std::vector<Index> perm{2, 0, 1};
  Tensord y = gather_rows(x, std::span<const Index>(perm));
  EXPECT_EQ(y.at({0, 0}), 20);
  EXPECT_EQ(y.at({1, 1}), 1);
  EXPECT_EQ(y.at({2, 0}), 10);
  const auto inv = invert_permutation(perm);
  Tensord back = gather_rows(y, std::span<const Index>(inv));
  EXPECT_TRUE((back.value() == x.value()).all());
  std::vector<Index> id{0, 1, 2};
  EXPECT_TRUE((gather_rows(x, std::span<const Index>(id)).value() == x.value()).all());
}

TEST(GatherRows, RejectsNonBijection) {
  Tensord x({3, 2});
  std::vector<Index> dup{0, 0, 1};
  std::vector<Index> shortp{0, 1};
  EXPECT_THROW(gather_rows(x, std::span<const Index>(dup)), std::invalid_argument);
  EXPECT_THROW(gather_rows(x, std::span<const Index>(shortp)), std::invalid_argument);
}

TEST(GatherRows, BackwardScattersUpstreamExactly) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 1 + static_cast<Index>(rng() % 40);
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensord x = random_tensor({n, 3}, rng);
    x.set_requires_grad(true);
    Tensord upstream = random_tensor({n, 3}, rng);
    Tape<double> tape;
    {
      TapeScope<double> scope(tape);
      Tensord loss = sum(mul(gather_rows(x, std::span<const Index>(perm)), upstream));
      tape.backward(loss);
    }
    const Array<double> g = x.grad();
    for (Index i = 0; i < n; ++i)
      for (Index c = 0; c < 3; ++c) EXPECT_EQ(g[perm[static_cast<std::size_t>(i)] * 3 + c], upstream.value()[i * 3 + c]);
  }
}

TEST(Backward, SquareAtThree) {
  Tensord x = Tensord::scalar(3.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(sum(square(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SiluGradientAtZeroIsHalf) {
  Tensord x({4});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(sum(silu(x)));
  for (Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 0.5);
}

TEST(Backward, MisuseIsReported) {
  Tensord x = Tensord::from({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensord y = square(x);
    EXPECT_THROW(tape.backward(y), TapeError);  // not scalar
    Tensord loss = sum(y);
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), TapeError);  // second call
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensord detached = sum(square(x.detach()));
    EXPECT_THROW(tape.backward(detached), TapeError);
  }
}

TEST(Tensor, NonFiniteResultIsAnError) {
  Tensord x = Tensord::from({2}, {-1.0, 1.0});
  EXPECT_THROW(log(x), NonFiniteError);
  EXPECT_THROW(div(x, Tensord({2})), NonFiniteError);
}

TEST(Tensor, BroadcastingFollowsTrailingAxes) {
  Tensord a = Tensord::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensord b = Tensord::from({3}, {10, 20, 30});
  Tensord c = Tensord::from({2, 1}, {100, 200});
  Tensord ab = add(a, b);
  EXPECT_EQ(ab.at({1, 2}), 36);
  Tensord ac = add(a, c);
  EXPECT_EQ(ac.at({1, 0}), 204);
  EXPECT_THROW(add(a, Tensord({2})), std::invalid_argument);
}

TEST(PixelShuffle, InterleavesSubpixels) {
  Tensord x = Tensord::from({4, 1, 1}, {1, 2, 3, 4});
  Tensord y = pixel_shuffle(x, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(y.at({0, 0, 0}), 1);
  EXPECT_EQ(y.at({0, 0, 1}), 2);
  EXPECT_EQ(y.at({0, 1, 0}), 3);
  EXPECT_EQ(y.at({0, 1, 1}), 4);
}

TEST(SelectiveScan, PrefixSumWhenDecayIsOne) {
  // A = 0 gives exp(delta * A) = 1; delta = 1, B = C = 1, D = 0.
  const Index n = 6;
  Tensord x = Tensord::from({n, 1}, {1, 2, 3, 4, 5, 6});
  Tensord delta = Tensord::constant({n, 1}, 1.0);
  Tensord y = selective_scan(x, delta, Tensord({1, 1}), Tensord::constant({n, 1}, 1.0),
                             Tensord::constant({n, 1}, 1.0), Tensord({1, 1}));
  double acc = 0;
  for (Index t = 0; t < n; ++t) {
    acc += x.value()[t];
    EXPECT_DOUBLE_EQ(y.value()[t], acc);
  }
}

TEST(WindowAttention, SingleTokenWindowsReturnValues) {
  std::mt19937_64 rng(2);
  Tensord q = random_tensor({6, 2}, rng), k = random_tensor({6, 2}, rng), v = random_tensor({6, 3}, rng);
  Tensord y = window_attention(q, k, v, 2, 3, 1);
  EXPECT_TRUE(((y.value() - v.value()).abs() < 1e-15).all());
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks on random inputs in [-2, 2]

class OpGradcheck : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};
  void expect_ok(const testing::GradcheckResult& r) {
    EXPECT_LE(r.max_rel_err, kOpTol) << "analytic " << r.worst_analytic << " numeric " << r.worst_numeric;
  }
};

TEST_F(OpGradcheck, Elementwise) {
  Tensord a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  Tensord row = random_tensor({4}, rng), col = random_tensor({3, 1}, rng);
  Tensord pos = random_tensor({3, 4}, rng, 0.5, 2.0);
  expect_ok(gradcheck({a, b}, [&] { return project(add(a, b)); }));
  expect_ok(gradcheck({a, row}, [&] { return project(sub(a, row)); }));
  expect_ok(gradcheck({a, col}, [&] { return project(mul(a, col)); }));
  expect_ok(gradcheck({a, pos}, [&] { return project(div(a, pos)); }));
  expect_ok(gradcheck({a}, [&] { return project(mul_scalar(add_scalar(a, 0.3), -1.7)); }));
}

TEST_F(OpGradcheck, Unary) {
  Tensord x = random_tensor({2, 5}, rng);
  Tensord pos = random_tensor({2, 5}, rng, 0.2, 2.0);
  expect_ok(gradcheck({x}, [&] { return project(exp(x)); }));
  expect_ok(gradcheck({pos}, [&] { return project(log(pos)); }));
  expect_ok(gradcheck({x}, [&] { return project(sigmoid(x)); }));
  expect_ok(gradcheck({x}, [&] { return project(silu(x)); }));
  expect_ok(gradcheck({x}, [&] { return project(softplus(x)); }));
  expect_ok(gradcheck({x}, [&] { return project(tanh(x)); }));
  expect_ok(gradcheck({x}, [&] { return project(square(x)); }));
  expect_ok(gradcheck({pos}, [&] { return project(sqrt(pos)); }));
  expect_ok(gradcheck({pos}, [&] { return project(pow(pos, 1.7)); }));
  expect_ok(gradcheck({x}, [&] { return project(neg(x)); }));
}

TEST_F(OpGradcheck, ReductionsAndShapes) {
  Tensord x = random_tensor({3, 4, 2}, rng);
  Tensord y = random_tensor({3, 1, 2}, rng);
  expect_ok(gradcheck({x}, [&] { return mul(sum(x), sum(x)); }));
  expect_ok(gradcheck({x}, [&] { return square(mean(x)); }));
  for (int axis : {0, 1, 2}) expect_ok(gradcheck({x}, [&] { return project(sum_axis(x, axis)); }));
  expect_ok(gradcheck({x}, [&] { return project(reshape(x, {4, 6})); }));
  expect_ok(gradcheck({x}, [&] { return project(transpose(reshape(x, {4, 6}))); }));
  expect_ok(gradcheck({x, y}, [&] { return project(concat<double>({x, y, x}, 1)); }));
  expect_ok(gradcheck({x}, [&] { return project(slice(x, 1, 1, 3)); }));
  expect_ok(gradcheck({x}, [&] { return project(softmax(x, 1)); }));
}

TEST_F(OpGradcheck, LinearAlgebraAndNormalization) {
  Tensord a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
  expect_ok(gradcheck({a, b}, [&] { return project(matmul(a, b)); }));
  Tensord w = random_tensor({2, 3, 4}, rng), x = random_tensor({2, 4, 5}, rng);
  expect_ok(gradcheck({w, x}, [&] { return project(channel_matmul(w, x)); }));
  Tensord gamma = random_tensor({1, 4}, rng), beta = random_tensor({1, 4}, rng);
  expect_ok(gradcheck({a, gamma, beta}, [&] { return project(layer_norm(a, gamma, beta)); }));
  expect_ok(gradcheck({a}, [&] { return project(normalize_rows(a)); }));
}

TEST_F(OpGradcheck, Convolutions) {
  Tensord x = random_tensor({2, 5, 6}, rng);
  Tensord k3 = random_tensor({3, 2, 3, 3}, rng), k1 = random_tensor({3, 2, 1, 1}, rng);
  Tensord k5 = random_tensor({2, 2, 5, 5}, rng);
  Tensord bias = random_tensor({3}, rng);
  expect_ok(gradcheck({x, k3, bias}, [&] { return project(conv2d(x, k3, bias)); }));
  expect_ok(gradcheck({x, k3}, [&] { return project(conv2d(x, k3, Tensord{}, 2)); }));
  expect_ok(gradcheck({x, k1, bias}, [&] { return project(conv2d(x, k1, bias)); }));
  std::vector<double> mask(25);
  for (int i = 0; i < 25; ++i) mask[static_cast<std::size_t>(i)] = ((i / 5 + i % 5) % 2 == 1) ? 1.0 : 0.0;
  expect_ok(gradcheck({x, k5}, [&] { return project(conv2d(x, k5, Tensord{}, 1, std::span<const double>(mask))); }));
  Tensord dk = random_tensor({2, 3, 3}, rng), db = random_tensor({2}, rng);
  expect_ok(gradcheck({x, dk, db}, [&] { return project(depthwise_conv2d(x, dk, db)); }));
  Tensord dk2 = random_tensor({2, 2, 3}, rng);
  expect_ok(gradcheck({x, dk2}, [&] { return project(depthwise_conv2d(x, dk2, Tensord{}, Padding::kValid)); }));
  Tensord ps = random_tensor({8, 2, 3}, rng);
  expect_ok(gradcheck({ps}, [&] { return project(pixel_shuffle(ps, 2)); }));
  expect_ok(gradcheck({x}, [&] { return project(avg_pool2(x)); }));
}

TEST_F(OpGradcheck, GatherStraightThroughAndClamps) {
  Tensord x = random_tensor({5, 3}, rng);
  std::vector<Index> perm{3, 1, 4, 0, 2};
  expect_ok(gradcheck({x}, [&] { return project(gather_rows(x, std::span<const Index>(perm))); }));
  // Clamp and relu away from the kinks.
  Tensord away = Tensord::from({4}, {-1.5, -0.5, 0.5, 1.5});
  expect_ok(gradcheck({away}, [&] { return project(clamp(away, -1.0, 1.0)); }));
  expect_ok(gradcheck({away}, [&] { return project(relu(away)); }));
  expect_ok(gradcheck({away}, [&] { return project(lower_bound(away, 0.0)); }));
}

TEST_F(OpGradcheck, SelectiveScan) {
  const Index n = 7, e = 3, s = 4;
  Tensord x = random_tensor({n, e}, rng);
  Tensord delta = random_tensor({n, e}, rng, 0.05, 1.0);
  Tensord a = random_tensor({e, s}, rng, -2.0, -0.1);
  Tensord b = random_tensor({n, s}, rng), c = random_tensor({n, s}, rng);
  Tensord d = random_tensor({1, e}, rng);
  expect_ok(gradcheck({x, delta, a, b, c, d}, [&] { return project(selective_scan(x, delta, a, b, c, d)); }));
}

TEST_F(OpGradcheck, WindowAttention) {
  const Index h = 5, w = 6;
  Tensord q = random_tensor({h * w, 4}, rng), k = random_tensor({h * w, 4}, rng), v = random_tensor({h * w, 3}, rng);
  expect_ok(gradcheck({q, k, v}, [&] { return project(window_attention(q, k, v, h, w, 4)); }));
}

TEST_F(OpGradcheck, GaussianLikelihood) {
  Tensord y = random_tensor({12}, rng, -3.0, 3.0);
  Tensord mu = random_tensor({12}, rng);
  Tensord sigma = random_tensor({12}, rng, 0.3, 2.0);
  expect_ok(gradcheck({y, mu, sigma}, [&] { return sum(log(gaussian_likelihood(y, mu, sigma, 1e-9))); }));
}

TEST(GaussianLikelihood, BinMassOracleAndFloor) {
  Tensord p = gaussian_likelihood(Tensord::from({1}, {0.0}), Tensord::from({1}, {0.0}), Tensord::from({1}, {1.0}),
                                  std::ldexp(1.0, -16));
  EXPECT_NEAR(p.value()[0], 2 * normal_cdf(0.5) - 1, 1e-12);
  EXPECT_NEAR(p.value()[0], 0.382925, 1e-6);
  Tensord wide = gaussian_likelihood(Tensord::from({1}, {0.0}), Tensord::from({1}, {0.0}),
                                     Tensord::from({1}, {1e9}), std::ldexp(1.0, -16));
  EXPECT_EQ(wide.value()[0], std::ldexp(1.0, -16));
  Tensord sym = gaussian_likelihood(Tensord::from({2}, {1.3, -0.7}), Tensord::from({2}, {0.3, 0.3}),
                                    Tensord::from({2}, {0.8, 0.8}), 1e-9);
  EXPECT_EQ(sym.value()[0], sym.value()[1]);
}

TEST(StraightThrough, ForwardIsHardGradientIsSoft) {
  std::mt19937_64 rng(8);
  Tensord soft = random_tensor({4, 3}, rng);
  Tensord hard = Tensord::constant({4, 3}, 1.0);
  soft.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensord y = straight_through(hard, soft);
  EXPECT_TRUE((y.value() == 1.0).all());
  tape.backward(testing::project(y));
  std::mt19937_64 same(99);
  Tensord expected = random_tensor({4, 3}, same, -1.0, 1.0);
  EXPECT_TRUE((soft.grad() == expected.value()).all());
}

TEST(Tape, NoRecordingWithoutScope) {
  Tensord x = Tensord::from({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  Tensord y = square(x);
  EXPECT_FALSE(y.requires_grad());
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    NoGradScope<double> off;
    EXPECT_FALSE(square(x).requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tensor, FloatInstantiationWorks) {
  Tensorf x = Tensorf::from({2, 2}, {1, 2, 3, 4});
  Tensorf y = matmul(x, x);
  EXPECT_FLOAT_EQ(y.at({1, 1}), 22.0f);
}

TEST(Serialization, RecordLayoutAndRoundtrip) {
  Tensord t = Tensord::from({2, 3}, {0.5, -1.0, 2.0, 3.25, 0.0, -7.5});
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  const std::string s = os.str();
  ASSERT_EQ(s.size(), 4u + 2 * 4 + 6 * 4);
  EXPECT_EQ(static_cast<unsigned char>(s[0]), 2);  // rank, little-endian
  EXPECT_EQ(static_cast<unsigned char>(s[8]), 3);  // second extent
  std::istringstream is(s, std::ios::binary);
  Tensord back = read_tensor<double>(is);
  EXPECT_EQ(back.shape(), t.shape());
  for (Index i = 0; i < t.size(); ++i) EXPECT_EQ(back.value()[i], t.value()[i]);

  // Records are f32: doubles round to the nearest float.
  Tensord third = Tensord::from({1}, {1.0 / 3.0});
  std::ostringstream os2(std::ios::binary);
  write_tensor(os2, third);
  std::istringstream is2(os2.str(), std::ios::binary);
  EXPECT_EQ(read_tensor<double>(is2).value()[0], static_cast<double>(1.0f / 3.0f));

  std::istringstream shortened(s.substr(0, s.size() - 1), std::ios::binary);
  EXPECT_THROW(read_tensor<double>(shortened), std::runtime_error);
}

}  // namespace
}  // namespace samic
