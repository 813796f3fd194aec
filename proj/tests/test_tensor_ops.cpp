#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "sliceattn/gradcheck.hpp"
#include "sliceattn/ops.hpp"
#include "sliceattn/rng.hpp"
#include "sliceattn/tensor.hpp"

using namespace sliceattn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Naive cross-correlation written from the definition, with explicit bounds
// checks instead of precomputed tap ranges.
Tensor conv_oracle(const Tensor& in, const Tensor& w, const Tensor& b, std::size_t stride,
                   std::size_t pad) {
  const long C = static_cast<long>(in.dim(0)), H = static_cast<long>(in.dim(1)),
             W = static_cast<long>(in.dim(2));
  const long O = static_cast<long>(w.dim(0)), K = static_cast<long>(w.dim(2));
  const long P = static_cast<long>(pad), S = static_cast<long>(stride);
  const long Ho = (H + 2 * P - K) / S + 1, Wo = (W + 2 * P - K) / S + 1;
  Tensor out(Shape{static_cast<std::size_t>(O), static_cast<std::size_t>(Ho),
                   static_cast<std::size_t>(Wo)});
  for (long o = 0; o < O; ++o)
    for (long y = 0; y < Ho; ++y)
      for (long x = 0; x < Wo; ++x) {
        double acc = b[static_cast<std::size_t>(o)];
        for (long c = 0; c < C; ++c)
          for (long ky = 0; ky < K; ++ky)
            for (long kx = 0; kx < K; ++kx) {
              const long iy = y * S + ky - P, ix = x * S + kx - P;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += w.at(o, c, ky, kx) * in.at(c, iy, ix);
            }
        out.at(o, y, x) = acc;
      }
  return out;
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

GradCheckReport check_op(const LossBuilder& build, std::vector<GradTarget> targets) {
  return check_gradients(build, targets, GradCheckOptions{}, 1e-6);
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor t(Shape{2, 3, 4}, 1.5);
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(t.offset(1, 2, 3), 23u);
  t.at(1, 0, 2) = 7.0;
  EXPECT_EQ(t[1 * 12 + 2], 7.0);
  EXPECT_THROW(t.dim(3), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor(Shape{1, 1, 1, 1, 1}), DimensionError);
  EXPECT_THROW(t.reshaped(Shape{5, 5}), DimensionError);
  EXPECT_EQ(t.reshaped(Shape{6, 4}).at(3, 2), 7.0);
  EXPECT_EQ(Tensor::scalar(3.0).item(), 3.0);
  EXPECT_THROW(t.item(), ContractError);
}

TEST(Tensor, SplitAtAxis) {
  const AxisSplit s = split_at_axis(Shape{2, 3, 4, 5}, 2);
  EXPECT_EQ(s.outer, 6u);
  EXPECT_EQ(s.n, 4u);
  EXPECT_EQ(s.inner, 5u);
}

TEST(Autograd, BackwardAccumulatesIntoLeavesAndReleasesTape) {
  Tensor a(Shape{3}, std::vector<double>{1, 2, 3});
  Tensor b(Shape{3}, std::vector<double>{4, 5, 6});
  a.requires_grad = true;
  b.requires_grad = true;
  Graph g;
  Var va = g.input(a), vb = g.input(b);
  Var loss = ops::sum(ops::mul(ops::add(va, vb), va));  // sum(a^2 + ab)
  EXPECT_DOUBLE_EQ(loss.value().item(), (1 + 4) + (4 + 10) + (9 + 18));
  g.backward(loss);
  ASSERT_TRUE(a.grad && b.grad);
  EXPECT_EQ(*a.grad, (std::vector<double>{2 * 1 + 4, 2 * 2 + 5, 2 * 3 + 6}));
  EXPECT_EQ(*b.grad, (std::vector<double>{1, 2, 3}));
  EXPECT_TRUE(g.released());
  EXPECT_THROW(loss.value(), ContractError);
}

TEST(Autograd, NonScalarLossAndConstantsHaveNoGradient) {
  Tensor a(Shape{2}, 1.0);
  Graph g;
  Var va = g.input(a);
  EXPECT_THROW(g.backward(va), ContractError);
  Graph g2;
  Var c = g2.constant(Tensor(Shape{2}, 1.0));
  g2.backward(ops::sum(c));
  EXPECT_FALSE(a.grad.has_value());
}

TEST(Autograd, NonFiniteForwardThrows) {
  Tensor big(Shape{1}, std::vector<double>{1e300});
  Graph g;
  Var vb = g.input(big);
  EXPECT_THROW(ops::mul(vb, vb), NumericError);
}

TEST(Ops, ElementwiseValues) {
  Graph g;
  Var a = g.constant(Tensor(Shape{3}, std::vector<double>{-1, 0, 2}));
  Var b = g.constant(Tensor(Shape{3}, std::vector<double>{3, 4, 5}));
  EXPECT_EQ(ops::sub(b, a).value().storage(), (std::vector<double>{4, 4, 3}));
  EXPECT_EQ(ops::relu(a).value().storage(), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(ops::scale(a, 2.0).value().storage(), (std::vector<double>{-2, 0, 4}));
  EXPECT_DOUBLE_EQ(ops::mean(b).value().item(), 4.0);
  EXPECT_NEAR(ops::sigmoid(a).value()[1], 0.5, 1e-15);
  EXPECT_NEAR(ops::sigmoid_scalar(-800.0), 0.0, 1e-300);
  EXPECT_NEAR(ops::sigmoid_scalar(800.0), 1.0, 1e-15);
  EXPECT_THROW(ops::add(a, g.constant(Tensor(Shape{2}))), DimensionError);
  EXPECT_EQ(ops::gather(b, {2, 0, 2}).value().storage(), (std::vector<double>{5, 3, 5}));
  EXPECT_THROW(ops::gather(b, {3}), DimensionError);
}

TEST(Ops, MatmulAndLinearMatchHandValues) {
  Graph g;
  Var x = g.constant(Tensor(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6}));
  Var w = g.constant(Tensor(Shape{3, 2}, std::vector<double>{1, 0, 0, 1, 1, 1}));
  Var b = g.constant(Tensor(Shape{2}, std::vector<double>{10, 20}));
  EXPECT_EQ(ops::linear(x, w, b).value().storage(), (std::vector<double>{14, 25, 20, 31}));
  EXPECT_THROW(ops::matmul(x, x), DimensionError);
}

TEST(Ops, ConcatAlongChannel) {
  Graph g;
  Var a = g.constant(Tensor(Shape{1, 2, 2}, 1.0));
  Var b = g.constant(Tensor(Shape{2, 2, 2}, 2.0));
  const Tensor c = ops::concat_along_channel({a, b}).value();
  EXPECT_EQ(c.shape(), (Shape{3, 2, 2}));
  EXPECT_EQ(c.at(0, 1, 1), 1.0);
  EXPECT_EQ(c.at(2, 0, 0), 2.0);
}

TEST(Ops, Conv2dMatchesScalarLoopOracle) {
  Rng rng(5);
  struct Case {
    std::size_t c, h, w, o, k, stride, pad;
  };
  for (const Case cs : {Case{3, 7, 6, 4, 3, 1, 1}, Case{2, 9, 8, 3, 3, 2, 1},
                        Case{4, 5, 5, 2, 1, 1, 0}, Case{1, 6, 7, 2, 5, 1, 2},
                        Case{3, 8, 8, 2, 3, 2, 0}}) {
    const Tensor in = random_tensor(Shape{cs.c, cs.h, cs.w}, rng);
    const Tensor w = random_tensor(Shape{cs.o, cs.c, cs.k, cs.k}, rng);
    const Tensor b = random_tensor(Shape{cs.o}, rng);
    Graph g;
    const Tensor got = ops::conv2d(g.constant(in), g.constant(w), g.constant(b), cs.stride, cs.pad).value();
    expect_close(got, conv_oracle(in, w, b, cs.stride, cs.pad), 1e-12);
  }
}

TEST(Ops, Conv2dBatchSharesWeights) {
  Rng rng(6);
  const Tensor batch = random_tensor(Shape{3, 2, 5, 5}, rng);
  const Tensor w = random_tensor(Shape{4, 2, 3, 3}, rng);
  const Tensor b = random_tensor(Shape{4}, rng);
  Graph g;
  const Tensor got = ops::conv2d(g.constant(batch), g.constant(w), g.constant(b), 1, 1).value();
  ASSERT_EQ(got.shape(), (Shape{3, 4, 5, 5}));
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor single(Shape{2, 5, 5});
    std::copy_n(batch.data().begin() + static_cast<long>(n * 50), 50, single.storage().begin());
    const Tensor ref = conv_oracle(single, w, b, 1, 1);
    for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(got[n * 100 + i], ref[i], 1e-12);
  }
}

TEST(Ops, Conv2dRejectsBadShapes) {
  Graph g;
  Var in = g.constant(Tensor(Shape{3, 5, 5}));
  EXPECT_THROW(ops::conv2d(in, g.constant(Tensor(Shape{2, 4, 3, 3})), g.constant(Tensor(Shape{2})), 1, 1),
               DimensionError);
  EXPECT_THROW(ops::conv2d(in, g.constant(Tensor(Shape{2, 3, 3, 3})), g.constant(Tensor(Shape{3})), 1, 1),
               DimensionError);
  EXPECT_THROW(ops::conv2d(in, g.constant(Tensor(Shape{2, 3, 3, 3})), g.constant(Tensor(Shape{2})), 0, 1),
               DimensionError);
}

TEST(Ops, SoftmaxSumsToOneAlongAxisAndAppliesTemperature) {
  Rng rng(7);
  const Tensor x = random_tensor(Shape{3, 4, 5}, rng, -5, 5);
  Graph g;
  const Tensor s = ops::softmax_over_axis(g.constant(x), 1, 2.0).value();
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t c = 0; c < 5; ++c) {
      double total = 0, z = 0;
      for (std::size_t b = 0; b < 4; ++b) {
        total += s.at(a, b, c);
        z += std::exp(x.at(a, b, c) / 2.0);
      }
      EXPECT_NEAR(total, 1.0, 1e-14);
      for (std::size_t b = 0; b < 4; ++b) EXPECT_NEAR(s.at(a, b, c), std::exp(x.at(a, b, c) / 2.0) / z, 1e-14);
    }
  EXPECT_THROW(ops::softmax_over_axis(g.constant(x), 0, 0.0), ContractError);
}

TEST(Ops, SoftmaxIsStableForLargeLogits) {
  Graph g;
  const Tensor s = ops::softmax_over_axis(g.constant(Tensor(Shape{2}, std::vector<double>{1000, 999})), 0, 1.0).value();
  EXPECT_NEAR(s[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(Ops, MaxNormalize) {
  Graph g;
  const Tensor x(Shape{2, 3}, std::vector<double>{1, -4, 2, 0.5, 0.25, 0.5});
  const Tensor y = ops::max_normalize_over_axis(g.constant(x), 1).value();
  EXPECT_EQ(y.storage(), (std::vector<double>{0.25, -1, 0.5, 1, 0.5, 1}));
  EXPECT_THROW(ops::max_normalize_over_axis(g.constant(Tensor(Shape{2, 2})), 0), NumericError);
}

TEST(Ops, LossValues) {
  Graph g;
  Var z = g.constant(Tensor(Shape{2}, std::vector<double>{0.0, 2.0}));
  const double bce = ops::bce_with_logits_sum(z, {1.0, 0.0}, {0.5, 0.5}).value().item();
  EXPECT_NEAR(bce, 0.5 * std::log(2.0) + 0.5 * std::log1p(std::exp(2.0)), 1e-14);
  Var p = g.constant(Tensor(Shape{3}, std::vector<double>{0.05, 2.0, -1.0}));
  const double sl1 = ops::smooth_l1_sum(p, {0.0, 0.0, 0.0}, {1, 1, 1}, 0.1).value().item();
  EXPECT_NEAR(sl1, 0.5 * 0.05 * 0.05 / 0.1 + (2.0 - 0.05) + (1.0 - 0.05), 1e-14);
}

TEST(Ops, PsroiBinsAndPooling) {
  // 3x3 region on a 6x6 map splits into unit bins; bin g reads channel group g.
  const auto bins = ops::psroi_bins(ops::CellRect{0, 3, 0, 3}, 3, 6, 6);
  ASSERT_EQ(bins.size(), 9u);
  EXPECT_EQ(bins[4].y0, 1u);
  EXPECT_EQ(bins[4].y1, 2u);
  EXPECT_EQ(bins[5].x0, 2u);
  // A one-cell region clamps every bin to that cell.
  for (const auto& b : ops::psroi_bins(ops::CellRect{5, 6, 5, 6}, 3, 6, 6)) {
    EXPECT_EQ(b.y1 - b.y0, 1u);
    EXPECT_EQ(b.x0, 5u);
  }
  Rng rng(8);
  const std::size_t k = 2, P = 2, H = 4, W = 5;
  const Tensor f = random_tensor(Shape{k * k * P, H, W}, rng);
  const ops::CellRect roi{0, 4, 1, 5};
  Graph g;
  const Tensor out = ops::psroi_pool(g.constant(f), {roi}, k).value();
  ASSERT_EQ(out.shape(), (Shape{1, k * k * P}));
  for (std::size_t by = 0; by < k; ++by)
    for (std::size_t bx = 0; bx < k; ++bx)
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t c = (by * k + bx) * P + p;
        double acc = 0;
        for (std::size_t y = 2 * by; y < 2 * by + 2; ++y)
          for (std::size_t x = 1 + 2 * bx; x < 3 + 2 * bx; ++x) acc += f.at(c, y, x);
        EXPECT_NEAR(out[c], acc / 4.0, 1e-14);
      }
  EXPECT_THROW(ops::psroi_pool(g.constant(Tensor(Shape{3, 4, 4})), {roi}, 2), DimensionError);
}

TEST(OpGradients, ElementwiseMatmulAndReductions) {
  Rng rng(9);
  Tensor a = random_tensor(Shape{3, 4}, rng), b = random_tensor(Shape{3, 4}, rng);
  Tensor w = random_tensor(Shape{4, 2}, rng), bias = random_tensor(Shape{2}, rng);
  const Tensor probe = random_tensor(Shape{3, 2}, rng);
  const auto rep = check_op(
      [&](Graph& g) {
        Var x = ops::add(ops::mul(g.input(a), g.input(b)), ops::sub(g.input(a), ops::scale(g.input(b), 0.3)));
        Var y = ops::sigmoid(ops::linear(x, g.input(w), g.input(bias)));
        return ops::add(ops::sum(ops::mul(y, g.constant(probe))), ops::mean(ops::relu(g.input(a))));
      },
      {{"a", &a}, {"b", &b}, {"w", &w}, {"bias", &bias}});
  EXPECT_TRUE(rep.passed()) << rep.max_error();
}

TEST(OpGradients, Conv2dStridedPadded) {
  Rng rng(10);
  Tensor in = random_tensor(Shape{2, 3, 7, 6}, rng), w = random_tensor(Shape{4, 3, 3, 3}, rng);
  Tensor b = random_tensor(Shape{4}, rng);
  const Tensor probe = random_tensor(Shape{2, 4, 4, 3}, rng);
  const auto rep = check_op(
      [&](Graph& g) {
        return ops::sum(ops::mul(ops::conv2d(g.input(in), g.input(w), g.input(b), 2, 1), g.constant(probe)));
      },
      {{"in", &in}, {"w", &w}, {"b", &b}});
  EXPECT_TRUE(rep.passed()) << rep.max_error();
}

TEST(OpGradients, SoftmaxMaxNormalizeReshapeGather) {
  Rng rng(11);
  Tensor x = random_tensor(Shape{3, 4, 5}, rng, -2, 2);
  const Tensor probe = random_tensor(Shape{3, 4, 5}, rng);
  for (std::size_t axis : {0u, 1u, 2u}) {
    const auto rep = check_op(
        [&](Graph& g) {
          Var s = ops::max_normalize_over_axis(ops::softmax_over_axis(g.input(x), axis, 1.7), axis);
          Var r = ops::reshape(ops::mul(s, g.constant(probe)), Shape{60});
          return ops::sum(ops::gather(r, {0, 5, 5, 17, 59, 33}));
        },
        {{"x", &x}});
    EXPECT_TRUE(rep.passed()) << "axis " << axis << ": " << rep.max_error();
  }
  // Signed inputs exercise the |.| branch of the normalizer.
  const auto rep = check_op(
      [&](Graph& g) { return ops::sum(ops::mul(ops::max_normalize_over_axis(g.input(x), 1), g.constant(probe))); },
      {{"x", &x}});
  EXPECT_TRUE(rep.passed()) << rep.max_error();
}

TEST(OpGradients, LossesConcatPsroi) {
  Rng rng(12);
  Tensor z = random_tensor(Shape{6}, rng, -3, 3);
  Tensor p = random_tensor(Shape{6}, rng, -2, 2);
  Tensor f1 = random_tensor(Shape{4, 4, 5}, rng), f2 = random_tensor(Shape{4, 4, 5}, rng);
  const std::vector<double> t{1, 0, 1, 0, 0, 1}, w{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const std::vector<double> pt{0.5, -0.5, 0.0, 1.5, 0.02, -2.0};
  const auto rep = check_op(
      [&](Graph& g) {
        Var feats = ops::concat_along_channel({g.input(f1), g.input(f2)});
        Var pooled = ops::psroi_pool(feats, {ops::CellRect{0, 4, 0, 5}, ops::CellRect{1, 3, 2, 4}}, 2);
        return ops::add(ops::add(ops::bce_with_logits_sum(g.input(z), t, w),
                                 ops::smooth_l1_sum(g.input(p), pt, w, 1.0 / 9.0)),
                        ops::sum(ops::mul(pooled, pooled)));
      },
      {{"z", &z}, {"p", &p}, {"f1", &f1}, {"f2", &f2}});
  EXPECT_TRUE(rep.passed()) << rep.max_error();
}

TEST(GradCheck, SignFlipIsDetected) {
  Rng rng(13);
  Tensor x = random_tensor(Shape{5}, rng);
  GradCheckOptions opt;
  opt.flip_sign = true;
  const auto rep = check_gradients([&](Graph& g) { return ops::sum(ops::mul(g.input(x), g.input(x))); },
                                   {{"x", &x}}, opt, 1e-6);
  EXPECT_FALSE(rep.passed());
  EXPECT_NEAR(rep.max_error(), 2.0, 1e-6);
}

TEST(GradCheck, RelativeErrorDefinition) {
  EXPECT_DOUBLE_EQ(relative_error({3, 4}, {3, 4}), 0.0);
  EXPECT_DOUBLE_EQ(relative_error({3, 4}, {0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(relative_error({0, 0}, {0, 0}), 0.0);
  // Both sides below the floor: the difference is measured against the floor.
  EXPECT_NEAR(relative_error({1e-12}, {2e-12}), 1e-12 / kGradNormFloor, 1e-20);
}

TEST(GradCheck, KinkWithinStepIsFlagged) {
  // relu at 3e-6: the step 1e-5 straddles the kink, so the central
  // difference (about 0.65) is not the derivative (1).
  Tensor x(Shape{3}, {3e-6, 0.5, -0.5});
  GradCheckOptions opt;
  opt.detect_kinks = true;
  const auto rep = check_gradients([&](Graph& g) { return ops::sum(ops::relu(g.input(x))); },
                                   {{"x", &x}}, opt, 1e-3);
  ASSERT_EQ(rep.entries.size(), 1u);
  EXPECT_EQ(rep.entries[0].kinks, 1u);
  EXPECT_FALSE(rep.passed());

  Tensor y(Shape{3}, {0.2, 0.5, -0.5});
  const auto smooth = check_gradients([&](Graph& g) { return ops::sum(ops::mul(ops::relu(g.input(y)), g.input(y))); },
                                      {{"y", &y}}, opt, 1e-6);
  EXPECT_EQ(smooth.kinks(), 0u);
  EXPECT_TRUE(smooth.passed()) << smooth.max_error();
}
