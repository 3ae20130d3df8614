#pragma once

// Synthetic data and imaging transforms: the spatially adaptive toy dataset,
// RGGB mosaicking, heteroskedastic noise, the bilinear demosaicking baseline
// and bicubic resampling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "pafu/error.hpp"
#include "pafu/rng.hpp"
#include "pafu/tensor.hpp"

namespace pafu {

struct SadConfig {
  std::size_t image_size = 89;
  std::size_t grid_size = 87;
  std::size_t square_size = 5;
  double black_density = 0.25;  // fraction of lattice cells that get a black centre
  std::uint64_t seed = 0;

  /// Same statistics at another image size (grid = size - 2).
  static SadConfig of_size(std::size_t image_size, double density = 0.25, std::uint64_t seed = 0) {
    return SadConfig{image_size, image_size - 2, 5, density, seed};
  }

  void validate() const {
    if (square_size % 2 == 0) throw ContractError("SAD square size must be odd");
    if (grid_size + 2 != image_size) throw ContractError("SAD grid size must equal image size - 2");
    if (grid_size < square_size) throw ContractError("SAD grid smaller than one square");
    if (black_density < 0.0 || black_density > 1.0) throw ContractError("SAD density must be in [0,1]");
  }

  /// Candidate black centres: one per square_size cell of the grid.
  std::vector<std::size_t> lattice() const {
    std::vector<std::size_t> c;
    const std::size_t off = (image_size - grid_size) / 2;
    for (std::size_t q = 0; (q + 1) * square_size <= grid_size; ++q) c.push_back(off + q * square_size + square_size / 2);
    return c;
  }
};

struct SadSample {
  Tensor input;   // 3 x S x S, noise in (0,1] with isolated black pixels
  Tensor target;  // input with each black pixel grown to a square of zeros
  std::vector<std::pair<std::size_t, std::size_t>> centers;
};

inline SadSample gen_sad_sample(const SadConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t S = cfg.image_size;
  SadSample s;
  s.input = Tensor(Shape{3, S, S});
  for (auto& v : s.input.data()) v = static_cast<float>(1.0 - rng.uniform());
  const auto lattice = cfg.lattice();
  for (std::size_t i : lattice)
    for (std::size_t j : lattice)
      if (rng.bernoulli(cfg.black_density)) s.centers.emplace_back(i, j);
  for (auto [i, j] : s.centers)
    for (std::size_t c = 0; c < 3; ++c) s.input(0, c, i, j) = 0.0f;
  s.target = s.input;
  const std::size_t r = cfg.square_size / 2;
  for (auto [i, j] : s.centers)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t a = i - r; a <= i + r; ++a)
        for (std::size_t b = j - r; b <= j + r; ++b) s.target(0, c, a, b) = 0.0f;
  return s;
}

/// Sample `index` of the dataset defined by cfg.seed.
inline SadSample gen_sad_sample(const SadConfig& cfg, std::uint64_t index) {
  Rng rng = Rng(cfg.seed).split(index);
  return gen_sad_sample(cfg, rng);
}

enum class CfaColor { R = 0, G = 1, B = 2 };

/// RGGB: (0,0)=R, (0,1)=G, (1,0)=G, (1,1)=B.
inline CfaColor cfa_color(std::size_t i, std::size_t j) {
  if (i % 2 == 0) return j % 2 == 0 ? CfaColor::R : CfaColor::G;
  return j % 2 == 0 ? CfaColor::G : CfaColor::B;
}

inline Tensor bayer_mosaic(const Tensor& rgb) {
  if (rgb.c() != 3) throw DimensionError("bayer_mosaic: expected 3 channels");
  const std::size_t H = rgb.h(), W = rgb.w();
  if (H % 2 || W % 2) throw DimensionError("bayer_mosaic: dimensions must be even");
  Tensor m(Shape{1, H, W});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) m(0, 0, i, j) = rgb(0, static_cast<std::size_t>(cfa_color(i, j)), i, j);
  return m;
}

/// Places each mosaic sample in its own colour channel (zeros elsewhere).
inline Tensor mosaic_to_sparse_rgb(const Tensor& mosaic) {
  const std::size_t H = mosaic.h(), W = mosaic.w();
  Tensor out(Shape{3, H, W});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) out(0, static_cast<std::size_t>(cfa_color(i, j)), i, j) = mosaic(0, 0, i, j);
  return out;
}

/// y = x + n, n ~ N(0, alpha*x + beta), clamped to [0, inf).
inline Tensor add_heteroskedastic_noise(const Tensor& x, double alpha, double beta, Rng& rng) {
  if (alpha < 0.0 || beta < 0.0) throw ContractError("heteroskedastic noise parameters must be >= 0");
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = static_cast<double>(x[i]);
    const double var = std::max(0.0, alpha * v + beta);
    const double s = var > 0.0 ? v + std::sqrt(var) * rng.normal() : v;
    y[i] = static_cast<float>(std::max(0.0, s));
  }
  return y;
}

/// Each missing colour is the mean of the same-colour samples in the 3x3
/// neighbourhood that fall inside the image (2 or 4 taps in the interior).
inline Tensor bilinear_demosaick(const Tensor& mosaic) {
  const auto H = static_cast<std::ptrdiff_t>(mosaic.h()), W = static_cast<std::ptrdiff_t>(mosaic.w());
  Tensor rgb(Shape{3, mosaic.h(), mosaic.w()});
  for (std::ptrdiff_t i = 0; i < H; ++i)
    for (std::ptrdiff_t j = 0; j < W; ++j) {
      const auto own = cfa_color(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      for (std::size_t c = 0; c < 3; ++c) {
        if (static_cast<std::size_t>(own) == c) {
          rgb(0, c, i, j) = mosaic(0, 0, i, j);
          continue;
        }
        double acc = 0.0;
        int taps = 0;
        for (std::ptrdiff_t a = i - 1; a <= i + 1; ++a)
          for (std::ptrdiff_t b = j - 1; b <= j + 1; ++b) {
            if (a < 0 || b < 0 || a >= H || b >= W) continue;
            if (static_cast<std::size_t>(cfa_color(static_cast<std::size_t>(a), static_cast<std::size_t>(b))) != c) continue;
            acc += mosaic(0, 0, a, b);
            ++taps;
          }
        rgb(0, c, i, j) = static_cast<float>(acc / taps);
      }
    }
  return rgb;
}

/// Rational scale factor up/down.
struct Scale {
  std::size_t up = 1;
  std::size_t down = 1;

  double value() const { return static_cast<double>(up) / static_cast<double>(down); }
  bool supported() const {
    if (up == 1 && down >= 1 && down <= 4) return true;
    return down == 1 && up >= 2 && up <= 4;
  }
  std::size_t apply(std::size_t n) const { return n * up / down; }
};

/// Cubic convolution kernel, a = -0.5.
inline double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

struct ResampleTaps {
  std::vector<std::size_t> first;  // per output sample, index into flattened lists
  std::vector<std::size_t> index;
  std::vector<double> weight;
  std::vector<std::size_t> count;
};

/// Normalised 1-D cubic taps for in -> out samples at scale s, centre aligned,
/// kernel widened by 1/s when downsampling, replicate borders.
inline ResampleTaps cubic_taps(std::size_t in, std::size_t out, double s) {
  ResampleTaps t;
  const double kscale = std::min(s, 1.0);
  const double support = 2.0 / kscale;
  for (std::size_t o = 0; o < out; ++o) {
    const double center = (static_cast<double>(o) + 0.5) / s - 0.5;
    const auto lo = static_cast<std::ptrdiff_t>(std::floor(center - support));
    const auto hi = static_cast<std::ptrdiff_t>(std::ceil(center + support));
    t.first.push_back(t.index.size());
    double total = 0.0;
    const std::size_t start = t.weight.size();
    for (std::ptrdiff_t j = lo; j <= hi; ++j) {
      const double w = cubic_kernel((center - static_cast<double>(j)) * kscale);
      if (w == 0.0) continue;
      const std::ptrdiff_t c = std::clamp<std::ptrdiff_t>(j, 0, static_cast<std::ptrdiff_t>(in) - 1);
      t.index.push_back(static_cast<std::size_t>(c));
      t.weight.push_back(w);
      total += w;
    }
    for (std::size_t e = start; e < t.weight.size(); ++e) t.weight[e] /= total;
    t.count.push_back(t.weight.size() - start);
  }
  return t;
}

/// Separable bicubic resampling of a C x H x W image. Output size is
/// H*up/down (floor).
inline Tensor resample_bicubic(const Tensor& img, Scale scale) {
  if (!scale.supported()) {
    throw ContractError("resample_bicubic: unsupported scale " + std::to_string(scale.up) + "/" +
                        std::to_string(scale.down));
  }
  if (scale.up == 1 && scale.down == 1) return img;
  const std::size_t C = img.c(), H = img.h(), W = img.w();
  const std::size_t Ho = scale.apply(H), Wo = scale.apply(W);
  if (Ho == 0 || Wo == 0) throw DimensionError("resample_bicubic: image too small for scale");
  const double s = scale.value();
  const ResampleTaps th = cubic_taps(H, Ho, s), tw = cubic_taps(W, Wo, s);
  Tensor tmp(Shape{C, H, Wo});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t o = 0; o < Wo; ++o) {
        double acc = 0.0;
        for (std::size_t e = tw.first[o]; e < tw.first[o] + tw.count[o]; ++e) acc += tw.weight[e] * img(0, c, i, tw.index[e]);
        tmp(0, c, i, o) = static_cast<float>(acc);
      }
  Tensor out(Shape{C, Ho, Wo});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t o = 0; o < Ho; ++o)
      for (std::size_t j = 0; j < Wo; ++j) {
        double acc = 0.0;
        for (std::size_t e = th.first[o]; e < th.first[o] + th.count[o]; ++e) acc += th.weight[e] * tmp(0, c, th.index[e], j);
        out(0, c, o, j) = static_cast<float>(acc);
      }
  return out;
}

/// Flip along H and/or W in steps of `block` pixels; block 2 keeps the RGGB
/// phase of a mosaic intact.
inline Tensor flip(const Tensor& x, bool horizontal, bool vertical, std::size_t block = 1) {
  const std::size_t H = x.h(), W = x.w();
  if ((vertical && H % block) || (horizontal && W % block)) throw DimensionError("flip: size not a multiple of block");
  auto map = [block](std::size_t p, std::size_t n) {
    const std::size_t cell = p / block, q = p % block;
    return (n / block - 1 - cell) * block + q;
  };
  Tensor out(x.shape());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const std::size_t si = vertical ? map(i, H) : i;
          const std::size_t sj = horizontal ? map(j, W) : j;
          out(n, c, i, j) = x(n, c, si, sj);
        }
  return out;
}

struct ImagePair {
  Tensor input;
  Tensor target;
};

inline ImagePair flip_pair(const ImagePair& s, bool horizontal, bool vertical, std::size_t block = 1) {
  return {flip(s.input, horizontal, vertical, block), flip(s.target, horizontal, vertical, block)};
}

/// Independent horizontal / vertical flips, each with probability p, applied
/// identically to input and target.
inline ImagePair augment_flips(const ImagePair& s, Rng& rng, double p = 0.5, std::size_t block = 1) {
  const bool h = rng.bernoulli(p);
  const bool v = rng.bernoulli(p);
  return flip_pair(s, h, v, block);
}

/// Window [top, top+h) x [left, left+w) of every channel.
inline Tensor crop(const Tensor& x, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (top + h > x.h() || left + w > x.w()) throw DimensionError("crop: window outside image");
  Tensor out(Shape{x.n(), x.c(), h, w});
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) out(n, c, i, j) = x(n, c, top + i, left + j);
  if (x.shape().rank() == 3) return out.reshaped(Shape{x.c(), h, w});
  return out;
}

}  // namespace pafu
