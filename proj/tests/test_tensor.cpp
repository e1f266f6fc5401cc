#include <gtest/gtest.h>

#include <cstdio>

#include "vistr/gradcheck.hpp"
#include "vistr/nn_ops.hpp"
#include "vistr/serialize.hpp"
#include "vistr/tensor.hpp"

using vistr::Rng;
using vistr::Shape;
using TensorD = vistr::Tensor<double>;
using TensorF = vistr::Tensor<float>;

namespace {

// Direct 6-loop convolution, independent of the im2col path.
std::vector<double> naive_conv3d(const std::vector<double>& x, int64_t B, int64_t Cin,
                                 int64_t Ti, int64_t Hi, int64_t Wi,
                                 const std::vector<double>& w, int64_t Cout, int64_t kt,
                                 int64_t kh, int64_t kw, vistr::Dims3 stride,
                                 vistr::Dims3 pad) {
  int64_t To = (Ti + 2 * pad[0] - kt) / stride[0] + 1;
  int64_t Ho = (Hi + 2 * pad[1] - kh) / stride[1] + 1;
  int64_t Wo = (Wi + 2 * pad[2] - kw) / stride[2] + 1;
  std::vector<double> y(B * Cout * To * Ho * Wo, 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t to = 0; to < To; ++to)
        for (int64_t ho = 0; ho < Ho; ++ho)
          for (int64_t wo = 0; wo < Wo; ++wo) {
            double acc = 0;
            for (int64_t ci = 0; ci < Cin; ++ci)
              for (int64_t dt = 0; dt < kt; ++dt)
                for (int64_t dh = 0; dh < kh; ++dh)
                  for (int64_t dw = 0; dw < kw; ++dw) {
                    int64_t t = to * stride[0] - pad[0] + dt;
                    int64_t h = ho * stride[1] - pad[1] + dh;
                    int64_t wi = wo * stride[2] - pad[2] + dw;
                    if (t < 0 || t >= Ti || h < 0 || h >= Hi || wi < 0 || wi >= Wi)
                      continue;
                    acc += x[(((b * Cin + ci) * Ti + t) * Hi + h) * Wi + wi] *
                           w[(((co * Cin + ci) * kt + dt) * kh + dh) * kw + dw];
                  }
            y[(((b * Cout + co) * To + to) * Ho + ho) * Wo + wo] = acc;
          }
  return y;
}

TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return TensorD::uniform(std::move(shape), rng, lo, hi);
}

}  // namespace

TEST(Softmax, UniformInput) {
  auto y = vistr::softmax(TensorD::from_data({3}, {0, 0, 0}), 0);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, LargeValuesDoNotOverflow) {
  auto y = vistr::softmax(TensorD::from_data({2}, {1000, 1000}), 0);
  EXPECT_DOUBLE_EQ(y.values()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.values()[1], 0.5);
}

TEST(Softmax, KnownValues) {
  auto y = vistr::softmax(TensorD::from_data({3}, {1, 2, 3}), 0);
  EXPECT_NEAR(y.values()[0], 0.09003057, 1e-8);
  EXPECT_NEAR(y.values()[1], 0.24472847, 1e-8);
  EXPECT_NEAR(y.values()[2], 0.66524096, 1e-8);
}

TEST(Softmax, SumsToOneAlongAxis) {
  Rng rng(1);
  auto x = random_tensor({4, 5, 6}, rng, -3, 3);
  for (int axis = 0; axis < 3; ++axis) {
    auto y = vistr::softmax(x, axis);
    auto s = vistr::sum(y, {axis});
    for (double v : s.values()) EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(Softmax, InvalidAxisThrows) {
  auto x = TensorD::zeros({2, 2});
  EXPECT_THROW(vistr::softmax(x, 2), std::invalid_argument);
}

TEST(Conv3d, OneByOneIdentity) {
  Rng rng(2);
  auto x = random_tensor({1, 1, 3, 4, 5}, rng);
  auto k = TensorD::from_data({1, 1, 1, 1, 1}, {1.0});
  auto y = vistr::conv3d(x, k);
  EXPECT_EQ(y.shape(), x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.values()[i], x.values()[i]);
}

TEST(Conv3d, AllOnesKernelOnConstantField) {
  const double c = 0.75;
  auto x = TensorD::full({1, 1, 5, 5, 5}, c);
  auto k = TensorD::ones({1, 1, 3, 3, 3});
  auto y = vistr::conv3d(x, k, {1, 1, 1}, {1, 1, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 5, 5, 5}));
  // interior voxels see the full 27-cell neighborhood
  auto at = [&](int64_t t, int64_t h, int64_t w) {
    return y.values()[(t * 5 + h) * 5 + w];
  };
  for (int64_t t = 1; t < 4; ++t)
    for (int64_t h = 1; h < 4; ++h)
      for (int64_t w = 1; w < 4; ++w) EXPECT_NEAR(at(t, h, w), 27.0 * c, 1e-12);
  EXPECT_NEAR(at(0, 0, 0), 8.0 * c, 1e-12);
}

TEST(Conv3d, MatchesNaiveLoops) {
  Rng rng(3);
  auto x = random_tensor({2, 1, 2, 2, 2}, rng);
  auto k = random_tensor({2, 1, 2, 2, 2}, rng);
  auto y = vistr::conv3d(x, k);
  auto ref = naive_conv3d(x.values(), 2, 1, 2, 2, 2, k.values(), 2, 2, 2, 2, {1, 1, 1},
                          {0, 0, 0});
  ASSERT_EQ(y.values().size(), ref.size());
  for (size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.values()[i], ref[i], 1e-12);
}

TEST(Conv3d, StridedPaddedMatchesNaiveLoops) {
  Rng rng(4);
  auto x = random_tensor({1, 3, 4, 5, 6}, rng);
  auto k = random_tensor({2, 3, 3, 2, 3}, rng);
  vistr::Dims3 stride{2, 1, 2}, pad{1, 1, 0};
  auto y = vistr::conv3d(x, k, stride, pad);
  auto ref = naive_conv3d(x.values(), 1, 3, 4, 5, 6, k.values(), 2, 3, 2, 3, stride, pad);
  ASSERT_EQ(y.values().size(), ref.size());
  for (size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.values()[i], ref[i], 1e-12);
}

TEST(Conv3d, ChannelMismatchThrows) {
  auto x = TensorD::zeros({1, 2, 2, 2, 2});
  auto k = TensorD::zeros({1, 3, 1, 1, 1});
  EXPECT_THROW(vistr::conv3d(x, k), std::invalid_argument);
}

TEST(Conv2d, MatchesNaiveViaSingletonDepth) {
  Rng rng(5);
  auto x = random_tensor({2, 2, 5, 4}, rng);
  auto k = random_tensor({3, 2, 3, 3}, rng);
  auto y = vistr::conv2d(x, k, {2, 1}, {1, 1});
  std::vector<double> x5 = x.values(), k5 = k.values();
  auto ref = naive_conv3d(x5, 2, 2, 1, 5, 4, k5, 3, 1, 3, 3, {1, 2, 1}, {0, 1, 1});
  ASSERT_EQ(y.values().size(), ref.size());
  for (size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.values()[i], ref[i], 1e-12);
}

TEST(Matmul, MatchesNaiveLoops) {
  Rng rng(6);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto c = vistr::matmul(a, b);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 5; ++j) {
      double acc = 0;
      for (int64_t k = 0; k < 4; ++k) acc += a.values()[i * 4 + k] * b.values()[k * 5 + j];
      EXPECT_NEAR(c.values()[i * 5 + j], acc, 1e-12);
    }
}

TEST(Matmul, BatchedMatchesPerSliceProducts) {
  Rng rng(7);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 4, 5}, rng);
  auto c = vistr::matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (int64_t s = 0; s < 2; ++s) {
    auto as = vistr::slice(a, {{s, s + 1}});
    auto bs = vistr::slice(b, {{s, s + 1}});
    auto cs = vistr::matmul(vistr::reshape(as, {3, 4}), vistr::reshape(bs, {4, 5}));
    for (int64_t i = 0; i < 15; ++i)
      EXPECT_NEAR(c.values()[s * 15 + i], cs.values()[i], 1e-12);
  }
}

TEST(Matmul, SharedOperandBroadcastsOverBatch) {
  Rng rng(8);
  auto a = random_tensor({3, 2, 4}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto c = vistr::matmul(a, w);
  EXPECT_EQ(c.shape(), (Shape{3, 2, 5}));
  // gradient accumulates over the batch
  auto aw = TensorD::from_data(a.shape(), a.values(), true);
  auto ww = TensorD::from_data(w.shape(), w.values(), true);
  auto loss = vistr::sum(vistr::matmul(aw, ww));
  loss.backward();
  EXPECT_EQ(ww.grad().shape(), (Shape{4, 5}));
  double g0 = ww.grad().values()[0];
  EXPECT_TRUE(std::isfinite(g0));
  EXPECT_NE(g0, 0.0);
}

TEST(ShapeOps, ReshapePermuteRoundTripIsExact) {
  Rng rng(9);
  auto x = random_tensor({3, 4, 5}, rng);
  auto y = vistr::permute(vistr::permute(x, {2, 0, 1}), {1, 2, 0});
  ASSERT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.values(), x.values());
  auto z = vistr::reshape(vistr::reshape(x, {60}), {3, 4, 5});
  EXPECT_EQ(z.values(), x.values());
}

TEST(ShapeOps, ReductionOverPermutedAxesMatchesDirectLoops) {
  Rng rng(10);
  auto x = random_tensor({3, 4, 5}, rng);
  auto p = vistr::permute(x, {1, 2, 0});        // [4,5,3]
  auto s = vistr::sum(p, {0, 1});               // sum over 4,5 -> [3]
  for (int64_t k = 0; k < 3; ++k) {
    double acc = 0;
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t j = 0; j < 5; ++j) acc += x.values()[(k * 4 + i) * 5 + j];
    EXPECT_NEAR(s.values()[k], acc, 1e-12);
  }
}

TEST(ShapeOps, SliceConcatInverse) {
  Rng rng(11);
  auto x = random_tensor({4, 6}, rng);
  auto a = vistr::slice(x, {{0, 2}});
  auto b = vistr::slice(x, {{2, 4}});
  auto back = vistr::concat<double>({a, b}, 0);
  EXPECT_EQ(back.values(), x.values());
}

TEST(Broadcast, AddMatchesExplicitExpansion) {
  auto a = TensorD::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = TensorD::from_data({3}, {10, 20, 30});
  auto y = vistr::add(a, b);
  std::vector<double> want = {11, 22, 33, 14, 25, 36};
  EXPECT_EQ(y.values(), want);
  auto c = TensorD::from_data({2, 1}, {100, 200});
  auto z = vistr::add(a, c);
  std::vector<double> want2 = {101, 102, 103, 204, 205, 206};
  EXPECT_EQ(z.values(), want2);
}

TEST(Broadcast, IncompatibleShapesThrow) {
  auto a = TensorD::zeros({2, 3});
  auto b = TensorD::zeros({4});
  EXPECT_THROW(vistr::add(a, b), std::invalid_argument);
}

TEST(Autodiff, SumOfSquaresGradient) {
  Rng rng(12);
  auto x = random_tensor({4, 3}, rng);
  double err = vistr::gradient_check<double>(
      [](const TensorD& t) { return vistr::sum(vistr::mul(t, t)); }, x, 1e-5);
  EXPECT_LT(err, 1e-6);
  // analytic gradient is exactly 2x
  auto leaf = TensorD::from_data(x.shape(), x.values(), true);
  auto loss = vistr::sum(vistr::mul(leaf, leaf));
  loss.backward();
  for (int64_t i = 0; i < x.numel(); ++i)
    EXPECT_NEAR(leaf.grad().values()[i], 2 * x.values()[i], 1e-12);
}

TEST(Autodiff, PrimitivesPassGradientCheck) {
  Rng rng(13);
  struct Case {
    const char* name;
    std::function<TensorD(const TensorD&)> f;
    double lo, hi;
  };
  std::vector<Case> cases = {
      {"exp", [](const TensorD& t) { return vistr::sum(vistr::exp(t)); }, -1, 1},
      {"log", [](const TensorD& t) { return vistr::sum(vistr::log(t)); }, 0.2, 2},
      {"sqrt", [](const TensorD& t) { return vistr::sum(vistr::sqrt(t)); }, 0.2, 2},
      {"relu", [](const TensorD& t) { return vistr::sum(vistr::relu(t)); }, 0.1, 1},
      {"sigmoid", [](const TensorD& t) { return vistr::sum(vistr::sigmoid(t)); }, -2, 2},
      {"softplus", [](const TensorD& t) { return vistr::sum(vistr::softplus(t)); }, -2, 2},
      {"abs", [](const TensorD& t) { return vistr::sum(vistr::abs(t)); }, 0.1, 1},
      {"pow", [](const TensorD& t) { return vistr::sum(vistr::pow_scalar(t, 2.5)); }, 0.2, 2},
      {"softmax",
       [](const TensorD& t) {
         auto w = TensorD::from_data({6}, {0.3, -0.2, 0.5, 0.1, -0.4, 0.7});
         return vistr::sum(vistr::mul(vistr::reshape(vistr::softmax(t, 1), {6}), w));
       },
       -1, 1},
      {"log_softmax",
       [](const TensorD& t) {
         auto w = TensorD::from_data({6}, {0.3, -0.2, 0.5, 0.1, -0.4, 0.7});
         return vistr::sum(vistr::mul(vistr::reshape(vistr::log_softmax(t, 0), {6}), w));
       },
       -1, 1},
      {"mean_axis",
       [](const TensorD& t) { return vistr::sum(vistr::mul(vistr::mean(t, {1}, true), t)); },
       -1, 1},
  };
  for (auto& c : cases) {
    auto x = random_tensor({2, 3}, rng, c.lo, c.hi);
    double err = vistr::gradient_check<double>(c.f, x, 1e-6);
    EXPECT_LT(err, 1e-7) << c.name;
  }
}

TEST(Autodiff, ConvAndUpsampleGradients) {
  Rng rng(14);
  auto k = random_tensor({2, 2, 2, 2, 2}, rng);
  auto x = random_tensor({1, 2, 3, 3, 3}, rng);
  double err_x = vistr::gradient_check<double>(
      [&](const TensorD& t) { return vistr::sum(vistr::conv3d(t, k, {1, 1, 1}, {1, 0, 1})); },
      x, 1e-5);
  EXPECT_LT(err_x, 1e-8);
  double err_k = vistr::gradient_check<double>(
      [&](const TensorD& t) { return vistr::sum(vistr::conv3d(x, t, {1, 1, 1}, {1, 0, 1})); },
      k, 1e-5);
  EXPECT_LT(err_k, 1e-8);
  auto u = random_tensor({1, 2, 3, 4}, rng);
  auto w = random_tensor({1, 2, 6, 8}, rng);
  double err_u = vistr::gradient_check<double>(
      [&](const TensorD& t) {
        return vistr::sum(vistr::mul(vistr::upsample_bilinear(t, 6, 8), w));
      },
      u, 1e-5);
  EXPECT_LT(err_u, 1e-8);
}

TEST(Autodiff, BroadcastGradientsReduceCorrectly) {
  Rng rng(15);
  auto b = random_tensor({3}, rng);
  auto a = random_tensor({4, 3}, rng);
  double err = vistr::gradient_check<double>(
      [&](const TensorD& t) { return vistr::sum(vistr::mul(vistr::add(a, t), vistr::add(a, t))); },
      b, 1e-5);
  EXPECT_LT(err, 1e-8);
}

TEST(Autodiff, NoGradModeRecordsNothing) {
  auto x = TensorD::from_data({2}, {1, 2}, true);
  vistr::NoGradGuard ng;
  auto y = vistr::mul(x, x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Attention, MatchesDirectReference) {
  Rng rng(16);
  const int64_t L = 7, d = 8, heads = 2, dh = d / heads;
  auto q = random_tensor({L, d}, rng);
  auto k = random_tensor({L, d}, rng);
  auto v = random_tensor({L, d}, rng);
  auto res = vistr::scaled_dot_attention(q, k, v, heads, /*want_probs=*/true);

  // direct O(L^2) reference per head
  std::vector<double> want(L * d, 0.0);
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < L; ++i) {
      std::vector<double> scores(L);
      double mx = -1e300;
      for (int64_t j = 0; j < L; ++j) {
        double s = 0;
        for (int64_t c = 0; c < dh; ++c)
          s += q.values()[i * d + h * dh + c] * k.values()[j * d + h * dh + c];
        scores[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, scores[j]);
      }
      double z = 0;
      for (int64_t j = 0; j < L; ++j) z += std::exp(scores[j] - mx);
      for (int64_t j = 0; j < L; ++j) {
        double p = std::exp(scores[j] - mx) / z;
        for (int64_t c = 0; c < dh; ++c)
          want[i * d + h * dh + c] += p * v.values()[j * d + h * dh + c];
      }
    }
  }
  for (int64_t i = 0; i < L * d; ++i) EXPECT_NEAR(res.output.values()[i], want[i], 1e-5);
  // attention rows sum to 1
  auto rs = vistr::sum(res.probs, {2});
  for (double s : rs.values()) EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(Attention, FusedBackwardMatchesFiniteDifferences) {
  Rng rng(160);
  const int64_t L = 5, d = 6, heads = 2;
  auto q = random_tensor({L, d}, rng);
  auto k = random_tensor({L, d}, rng);
  auto v = random_tensor({L, d}, rng);
  vistr::Rng wr(161);
  auto w = TensorD::uniform({L, d}, wr, -1, 1);
  auto objective = [&](const TensorD& qq, const TensorD& kk, const TensorD& vv) {
    auto res = vistr::scaled_dot_attention(qq, kk, vv, heads);
    return vistr::sum(vistr::mul(res.output, w));
  };
  double eq = vistr::gradient_check<double>(
      [&](const TensorD& t) { return objective(t, k, v); }, q, 1e-6);
  double ek = vistr::gradient_check<double>(
      [&](const TensorD& t) { return objective(q, t, v); }, k, 1e-6);
  double ev = vistr::gradient_check<double>(
      [&](const TensorD& t) { return objective(q, k, t); }, v, 1e-6);
  EXPECT_LT(eq, 1e-7);
  EXPECT_LT(ek, 1e-7);
  EXPECT_LT(ev, 1e-7);
}

TEST(Norms, LayerNormNormalizes) {
  Rng rng(17);
  auto x = random_tensor({4, 6}, rng, -2, 2);
  auto gamma = TensorD::ones({6});
  auto beta = TensorD::zeros({6});
  auto y = vistr::layer_norm(x, gamma, beta);
  for (int64_t i = 0; i < 4; ++i) {
    double m = 0, v = 0;
    for (int64_t j = 0; j < 6; ++j) m += y.values()[i * 6 + j];
    m /= 6;
    for (int64_t j = 0; j < 6; ++j) {
      double c = y.values()[i * 6 + j] - m;
      v += c * c;
    }
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v / 6, 1.0, 1e-3);  // eps shifts variance slightly below 1
  }
  double err = vistr::gradient_check<double>(
      [&](const TensorD& t) {
        auto w = TensorD::uniform({4, 6}, rng, -1, 1);
        vistr::Rng r2(99);
        auto w2 = TensorD::uniform({4, 6}, r2, -1, 1);
        return vistr::sum(vistr::mul(vistr::layer_norm(t, gamma, beta), w2));
      },
      x, 1e-6);
  EXPECT_LT(err, 1e-7);
}

TEST(Norms, GroupNormGroupStatistics) {
  Rng rng(18);
  auto x = random_tensor({2, 4, 3, 3}, rng, -2, 2);
  auto gamma = TensorD::ones({4});
  auto beta = TensorD::zeros({4});
  auto y = vistr::group_norm(x, gamma, beta, 2);
  // each (batch, group) slab of 2*9 values is standardized
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t g = 0; g < 2; ++g) {
      double m = 0;
      for (int64_t c = 0; c < 2; ++c)
        for (int64_t s = 0; s < 9; ++s) m += y.values()[((b * 4 + g * 2 + c) * 9) + s];
      EXPECT_NEAR(m / 18.0, 0.0, 1e-9);
    }
  double err = vistr::gradient_check<double>(
      [&](const TensorD& t) {
        vistr::Rng r2(100);
        auto w = TensorD::uniform({2, 4, 3, 3}, r2, -1, 1);
        return vistr::sum(vistr::mul(vistr::group_norm(t, gamma, beta, 2), w));
      },
      x, 1e-6);
  EXPECT_LT(err, 1e-7);
}

TEST(GradientCheck, RejectsNonScalarObjective) {
  auto x = TensorD::zeros({3});
  EXPECT_THROW(vistr::gradient_check<double>(
                   [](const TensorD& t) { return vistr::mul(t, t); }, x, 1e-5),
               std::invalid_argument);
}

TEST(Serialize, CheckpointRoundTripIsBitExact) {
  Rng rng(19);
  std::vector<vistr::NamedTensor<float>> params;
  params.push_back({"enc.w", TensorF::uniform({7, 5}, rng, -1, 1)});
  params.push_back({"enc.b", TensorF::uniform({5}, rng, -1, 1)});
  params.push_back({"head.w", TensorF::uniform({3, 2, 2}, rng, -1, 1)});
  std::string path = ::testing::TempDir() + "ckpt_roundtrip.vt";
  vistr::save_tensors(path, params);
  auto loaded = vistr::load_tensors<float>(path);
  ASSERT_EQ(loaded.size(), params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(loaded[i].name, params[i].name);
    EXPECT_EQ(loaded[i].tensor.shape(), params[i].tensor.shape());
    EXPECT_EQ(loaded[i].tensor.values(), params[i].tensor.values());
  }
  std::remove(path.c_str());
}

TEST(Serialize, RejectsCorruptMagic) {
  std::string path = ::testing::TempDir() + "bad_magic.vt";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPEgarbage";
  }
  EXPECT_THROW(vistr::load_tensors<float>(path), vistr::format_error);
  std::remove(path.c_str());
}

TEST(Determinism, RepeatedForwardIsBitwiseIdentical) {
  Rng rng(20);
  auto a = TensorD::uniform({17, 13}, rng, -1, 1);
  auto b = TensorD::uniform({13, 11}, rng, -1, 1);
  auto y1 = vistr::softmax(vistr::matmul(a, b), 1);
  auto y2 = vistr::softmax(vistr::matmul(a, b), 1);
  EXPECT_EQ(y1.values(), y2.values());
}
