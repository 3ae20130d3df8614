#include <gtest/gtest.h>

#include "pafu/ops.hpp"
#include "pafu/rng.hpp"

using namespace pafu;

namespace {

// y[n,o,i,j] = sum_{c,u,v} w[o,c,u,v] * x[n,c,i+u-r,j+v-r], written out directly.
Tensor conv_oracle(const Tensor& x, const Tensor& w, Padding pad) {
  const long N = x.n(), C = x.c(), H = x.h(), W = x.w(), O = w.n(), k = w.h(), r = k / 2;
  Tensor y(Shape{x.n(), w.n(), x.h(), x.w()});
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o)
      for (long i = 0; i < H; ++i)
        for (long j = 0; j < W; ++j) {
          double acc = 0.0;
          for (long c = 0; c < C; ++c)
            for (long u = 0; u < k; ++u)
              for (long v = 0; v < k; ++v) {
                long a = i + u - r, b = j + v - r;
                if (pad == Padding::Zero) {
                  if (a < 0 || a >= H || b < 0 || b >= W) continue;
                } else {
                  a = std::clamp(a, 0L, H - 1);
                  b = std::clamp(b, 0L, W - 1);
                }
                acc += static_cast<double>(w(o, c, u, v)) * x(n, c, a, b);
              }
          y(n, o, i, j) = static_cast<float>(acc);
        }
  return y;
}

Tensor t2x2() { return Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4}); }

}  // namespace

TEST(Shape, LowerRanksAreRightAligned) {
  const Shape s{3, 5};
  EXPECT_EQ(s.n(), 1u);
  EXPECT_EQ(s.c(), 1u);
  EXPECT_EQ(s.h(), 3u);
  EXPECT_EQ(s.w(), 5u);
  EXPECT_EQ(s.numel(), 15u);
  EXPECT_EQ(s.rank(), 2u);
}

TEST(Shape, RejectsZeroExtentAndRankAboveFour) {
  EXPECT_THROW(Shape({2, 0}), DimensionError);
  EXPECT_THROW(Shape({1, 1, 1, 1, 1}), DimensionError);
}

TEST(Tensor, IndexLayoutIsNchw) {
  Tensor t(Shape{2, 3, 4, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i);
  EXPECT_EQ(t(1, 2, 3, 4), static_cast<float>(((1 * 3 + 2) * 4 + 3) * 5 + 4));
  EXPECT_EQ(t(0, 1, 0, 2), static_cast<float>((1 * 4 + 0) * 5 + 2));
}

TEST(Tensor, DataSizeMustMatchShape) { EXPECT_THROW(Tensor(Shape{2, 2}, {1, 2, 3}), DimensionError); }

TEST(Conv2d, DiracIsIdentity) {
  Tensor w(Shape{1, 1, 3, 3});
  w(0, 0, 1, 1) = 1;
  EXPECT_EQ(conv2d(t2x2(), w, Padding::Zero), t2x2());
  EXPECT_EQ(conv2d(t2x2(), w, Padding::Replicate), t2x2());
}

TEST(Conv2d, PointwiseScale) {
  const Tensor w(Shape{1, 1, 1, 1}, {2});
  EXPECT_EQ(conv2d(t2x2(), w), Tensor(Shape{1, 1, 2, 2}, {2, 4, 6, 8}));
}

TEST(Conv2d, MatchesLoopOracle) {
  Rng rng(11);
  for (Padding pad : {Padding::Zero, Padding::Replicate}) {
    const Tensor x = randn(Shape{1, 3, 8, 8}, rng);
    const Tensor w = randn(Shape{4, 3, 3, 3}, rng);
    EXPECT_LE(max_abs_diff(conv2d(x, w, pad), conv_oracle(x, w, pad)), 1e-5);
    const Tensor x2 = randn(Shape{2, 2, 7, 9}, rng);
    const Tensor w2 = randn(Shape{3, 2, 5, 5}, rng);
    EXPECT_LE(max_abs_diff(conv2d(x2, w2, pad), conv_oracle(x2, w2, pad)), 1e-4);
  }
}

TEST(Conv2d, EqualsIm2colTimesFlattenedWeights) {
  Rng rng(5);
  const Tensor x = randn(Shape{2, 3, 6, 5}, rng);
  const Tensor w = randn(Shape{4, 3, 3, 3}, rng);
  const Tensor cols = im2col(x, 3, Padding::Zero);
  const Tensor prod = matmul(cols, transpose(w.reshaped(Shape{4, 27})));
  EXPECT_LE(max_abs_diff(from_rows(prod, 2, 6, 5), conv2d(x, w)), 1e-5);
}

TEST(Conv2d, Errors) {
  EXPECT_THROW(conv2d(Tensor(Shape{1, 2, 4, 4}), Tensor(Shape{1, 3, 3, 3})), DimensionError);
  EXPECT_THROW(conv2d(Tensor(Shape{1, 1, 4, 4}), Tensor(Shape{1, 1, 2, 2})), UnsupportedKernelError);
}

TEST(Im2col, PointwiseSupportIsReshape) {
  const Tensor cols = im2col(t2x2(), 1, Padding::Zero);
  EXPECT_EQ(cols.shape(), (Shape{4, 1}));
  EXPECT_EQ(cols, Tensor(Shape{4, 1}, {1, 2, 3, 4}));
}

TEST(Im2col, ZeroInZeroOut) {
  const Tensor cols = im2col(Tensor(Shape{1, 2, 4, 3}), 3, Padding::Replicate);
  for (float v : cols.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Im2col, MatchesNaivePatchExtractor) {
  Tensor x(Shape{1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) x[i] = static_cast<float>(i + 1);
  const Tensor cols = im2col(x, 3, Padding::Zero);
  // centre pixel sees the whole image, corner (0,0) sees zeros above/left
  for (std::size_t l = 0; l < 9; ++l) EXPECT_EQ(cols(0, 0, 4, l), static_cast<float>(l + 1));
  const std::vector<float> corner{0, 0, 0, 0, 1, 2, 0, 4, 5};
  for (std::size_t l = 0; l < 9; ++l) EXPECT_EQ(cols(0, 0, 0, l), corner[l]);

  Rng rng(3);
  for (Padding pad : {Padding::Zero, Padding::Replicate}) {
    const Tensor y = randn(Shape{2, 3, 5, 6}, rng);
    const Tensor c = im2col(y, 5, pad);
    const long H = 5, W = 6;
    for (long n = 0; n < 2; ++n)
      for (long i = 0; i < H; ++i)
        for (long j = 0; j < W; ++j)
          for (long ch = 0; ch < 3; ++ch)
            for (long u = 0; u < 5; ++u)
              for (long v = 0; v < 5; ++v) {
                long a = i + u - 2, b = j + v - 2;
                float expect;
                if (pad == Padding::Zero) {
                  expect = (a < 0 || a >= H || b < 0 || b >= W) ? 0.0f : y(n, ch, a, b);
                } else {
                  expect = y(n, ch, std::clamp(a, 0L, H - 1), std::clamp(b, 0L, W - 1));
                }
                ASSERT_EQ(c(0, 0, (n * H + i) * W + j, (ch * 5 + u) * 5 + v), expect);
              }
  }
}

TEST(Col2im, PointwiseSupportInvertsIm2col) {
  Rng rng(1);
  const Tensor x = randn(Shape{2, 3, 4, 5}, rng);
  EXPECT_EQ(col2im(im2col(x, 1, Padding::Zero), x.shape(), 1, Padding::Zero), x);
}

TEST(Col2im, ZeroColumnsGiveZeroImage) {
  const Tensor out = col2im(Tensor(Shape{12, 18}), Shape{1, 2, 3, 4}, 3, Padding::Zero);
  for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Col2im, IsAdjointOfIm2col) {
  Rng rng(9);
  for (Padding pad : {Padding::Zero, Padding::Replicate}) {
    for (std::size_t k : {3u, 5u}) {
      const Tensor x = randn(Shape{2, 3, 6, 7}, rng);
      const Tensor g = randn(Shape{2 * 6 * 7, 3 * k * k}, rng);
      const double lhs = sum(mul(im2col(x, k, pad), g));
      const double rhs = sum(mul(x, col2im(g, x.shape(), k, pad)));
      EXPECT_LE(std::abs(lhs - rhs), 1e-4 * std::max(1.0, std::abs(lhs)));
    }
  }
}

TEST(Col2im, RowCountMismatch) {
  EXPECT_THROW(col2im(Tensor(Shape{11, 18}), Shape{1, 2, 3, 4}, 3, Padding::Zero), DimensionError);
}

TEST(DepthToSpace, SmallExample) {
  const Tensor x(Shape{1, 4, 1, 1}, {1, 2, 3, 4});
  EXPECT_EQ(depth_to_space(x, 2), Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
}

TEST(DepthToSpace, TwelveChannelsToRgb) {
  Rng rng(2);
  const Tensor x = randn(Shape{1, 12, 5, 4}, rng);
  const Tensor y = depth_to_space(x, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 10, 8}));
  EXPECT_EQ(y(0, 1, 3, 6), x(0, 1 * 4 + 1 * 2 + 0, 1, 3));
}

TEST(DepthToSpace, RoundTripIsBitwise) {
  Rng rng(4);
  const Tensor x = randn(Shape{2, 18, 3, 5}, rng);
  EXPECT_EQ(space_to_depth(depth_to_space(x, 3), 3), x);
  const Tensor y = randn(Shape{1, 2, 6, 4}, rng);
  EXPECT_EQ(depth_to_space(space_to_depth(y, 2), 2), y);
}

TEST(DepthToSpace, IndivisibleChannels) {
  EXPECT_THROW(depth_to_space(Tensor(Shape{1, 6, 2, 2}), 2), DimensionError);
  EXPECT_THROW(space_to_depth(Tensor(Shape{1, 1, 3, 4}), 2), DimensionError);
}

TEST(Elementwise, Basics) {
  Rng rng(6);
  const Tensor x = randn(Shape{3, 4}, rng);
  EXPECT_EQ(add(x, Tensor(x.shape())), x);
  EXPECT_EQ(relu(Tensor(Shape{3}, {-1, 0, 2})), Tensor(Shape{3}, {0, 0, 2}));
  EXPECT_EQ(abs(Tensor(Shape{3}, {-1, 0, 2})), Tensor(Shape{3}, {1, 0, 2}));
  EXPECT_EQ(scale(Tensor(Shape{2}, {1, -2}), 3.0f), Tensor(Shape{2}, {3, -6}));
  EXPECT_EQ(sub(x, x), Tensor(x.shape()));
}

TEST(Elementwise, MulMatchesScalarLoop) {
  Rng rng(7);
  const Tensor a = randn(Shape{2, 3, 4, 5}, rng), b = randn(Shape{2, 3, 4, 5}, rng);
  const Tensor c = mul(a, b);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(c[i], a[i] * b[i]);
}

TEST(Elementwise, ScalarBroadcastOnly) {
  const Tensor a(Shape{2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(add(a, Tensor::scalar(1)), Tensor(Shape{2, 2}, {2, 3, 4, 5}));
  EXPECT_THROW(add(a, Tensor(Shape{4})), DimensionError);
}

TEST(Matmul, Identity) {
  Rng rng(8);
  const Tensor a = randn(Shape{3, 4}, rng);
  Tensor eye(Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye(0, 0, i, i) = 1;
  EXPECT_EQ(matmul(a, eye), a);
}

TEST(Matmul, SmallExample) {
  EXPECT_EQ(matmul(Tensor(Shape{2, 2}, {1, 2, 3, 4}), Tensor(Shape{2, 1}, {1, 1})), Tensor(Shape{2, 1}, {3, 7}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(10);
  const Tensor a = randn(Shape{17, 9}, rng), b = randn(Shape{9, 5}, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 17; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < 9; ++l) acc += static_cast<double>(a(0, 0, i, l)) * b(0, 0, l, j);
      EXPECT_LE(std::abs(c(0, 0, i, j) - acc), 1e-5 * std::max(1.0, std::abs(acc)));
    }
}

TEST(Matmul, InnerMismatch) { EXPECT_THROW(matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3})), DimensionError); }

TEST(KernelPadding, PadThenCropIsIdentity) {
  Rng rng(12);
  const Tensor w = randn(Shape{2, 3, 3, 3}, rng);
  const Tensor p = pad_kernel(w, 7);
  EXPECT_EQ(p.shape(), (Shape{2, 3, 7, 7}));
  EXPECT_EQ(p(1, 2, 3, 3), w(1, 2, 1, 1));
  EXPECT_EQ(p(1, 2, 0, 0), 0.0f);
  EXPECT_EQ(crop_kernel(p, 3), w);
}
