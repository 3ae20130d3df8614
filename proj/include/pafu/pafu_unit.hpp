#pragma once

// Pixel adaptive filtering unit: a bank of n kernels, a small CNN that scores
// each kernel per pixel, a straight-through Gumbel-softmax that turns scores
// into a one-hot selection, and the spatially varying convolution that
// applies the selected kernel at every pixel.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "pafu/autodiff.hpp"
#include "pafu/error.hpp"
#include "pafu/ops.hpp"
#include "pafu/rng.hpp"
#include "pafu/tensor.hpp"

namespace pafu {

inline constexpr double kNormGuard = 1e-12;
inline constexpr double kGumbelClamp = 1e-10;

struct KernelBank {
  std::vector<Tensor> kernels;

  std::size_t count() const { return kernels.size(); }
  std::size_t cout() const { return kernels.at(0).n(); }
  std::size_t cin() const { return kernels.at(0).c(); }
  std::size_t max_support() const {
    std::size_t k = 0;
    for (const auto& w : kernels) k = std::max(k, w.h());
    return k;
  }
  std::vector<std::size_t> supports() const {
    std::vector<std::size_t> s;
    for (const auto& w : kernels) s.push_back(w.h());
    return s;
  }

  void validate() const {
    if (kernels.empty()) throw ContractError("kernel bank is empty");
    for (const auto& w : kernels) {
      if (w.n() != cout() || w.c() != cin()) throw DimensionError("kernel bank: Cout/Cin differ between kernels");
      if (w.h() != w.w()) throw UnsupportedKernelError("kernel bank: kernels must be square");
      detail::require_odd_support(w.h());
      for (float v : w.data())
        if (!std::isfinite(v)) throw NumericError("kernel bank: non-finite weight");
    }
  }

  /// Zero-mean Gaussian kernels with std sqrt(2 / (Cin k^2)).
  static KernelBank random(std::size_t cout, std::size_t cin, const std::vector<std::size_t>& supports, Rng& rng) {
    KernelBank bank;
    for (std::size_t k : supports) {
      detail::require_odd_support(k);
      bank.kernels.push_back(randn(Shape{cout, cin, k, k}, rng, std::sqrt(2.0 / static_cast<double>(cin * k * k))));
    }
    return bank;
  }
};

struct ConvLayer {
  Tensor weight;  // Cout x Cin x k x k
  Tensor bias;    // Cout
};

/// Same-padded conv stack with relu between layers; the last layer emits one
/// logit per kernel.
struct SelectorNet {
  std::vector<ConvLayer> layers;

  std::size_t in_channels() const { return layers.at(0).weight.c(); }
  std::size_t out_channels() const { return layers.back().weight.n(); }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// `depth` 3x3 layers: in -> width -> ... -> width -> n.
  static SelectorNet make(std::size_t in, std::size_t n, std::size_t width, std::size_t depth, Rng& rng,
                          std::size_t k = 3) {
    if (depth < 1) throw ContractError("selector depth must be >= 1");
    SelectorNet net;
    std::size_t c = in;
    for (std::size_t d = 0; d < depth; ++d) {
      const std::size_t o = d + 1 == depth ? n : width;
      net.layers.push_back({randn(Shape{o, c, k, k}, rng, std::sqrt(2.0 / static_cast<double>(c * k * k))),
                            Tensor(Shape{o})});
      c = o;
    }
    return net;
  }
};

/// Per-pixel kernel assignment. `hard` is one-hot along the kernel axis,
/// `soft` holds the probabilities used by the backward pass.
struct SelectionMap {
  Tensor hard;  // N x n x H x W
  Tensor soft;  // N x n x H x W
  double tau = 1.0;

  std::size_t kernels() const { return hard.c(); }

  /// argmax index per pixel as N x 1 x H x W.
  std::vector<std::size_t> indices() const {
    const std::size_t N = hard.n(), n = hard.c(), HW = hard.h() * hard.w();
    std::vector<std::size_t> idx(N * HW, 0);
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t p = 0; p < HW; ++p)
        for (std::size_t k = 0; k < n; ++k)
          if (hard[(b * n + k) * HW + p] > 0.5f) {
            idx[b * HW + p] = k;
            break;
          }
    return idx;
  }

  /// One-hot selection of `kernel` at every pixel.
  static SelectionMap uniform(std::size_t N, std::size_t n, std::size_t H, std::size_t W, std::size_t kernel) {
    SelectionMap z;
    z.hard = Tensor(Shape{N, n, H, W});
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) z.hard(b, kernel, i, j) = 1.0f;
    z.soft = z.hard;
    return z;
  }

  /// One-hot from explicit per-pixel indices (N*H*W entries, batch-major).
  static SelectionMap from_indices(std::size_t N, std::size_t n, std::size_t H, std::size_t W,
                                   const std::vector<std::size_t>& idx) {
    if (idx.size() != N * H * W) throw DimensionError("SelectionMap::from_indices: index count mismatch");
    SelectionMap z;
    z.hard = Tensor(Shape{N, n, H, W});
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const std::size_t k = idx[(b * H + i) * W + j];
          if (k >= n) throw DimensionError("SelectionMap::from_indices: index out of range");
          z.hard(b, k, i, j) = 1.0f;
        }
    z.soft = z.hard;
    return z;
  }
};

/// Gumbel(0,1) noise of the given shape.
template <typename T = float>
BasicTensor<T> gumbel_noise(Shape shape, Rng& rng) {
  BasicTensor<T> g(shape);
  for (auto& v : g.data()) v = static_cast<T>(rng.gumbel(kGumbelClamp));
  return g;
}

namespace detail {

// softmax((f + g) / tau) along the channel axis, plus the one-hot of its
// argmax with ties going to the lowest index.
template <typename T>
void gumbel_softmax_values(const BasicTensor<T>& logits, const BasicTensor<T>* noise, double tau,
                           BasicTensor<T>& soft, BasicTensor<T>& hard) {
  const std::size_t N = logits.n(), n = logits.c(), HW = logits.h() * logits.w();
  soft = BasicTensor<T>(logits.shape());
  hard = BasicTensor<T>(logits.shape());
  std::vector<double> s(n);
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t p = 0; p < HW; ++p) {
      double mx = -INFINITY;
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t idx = (b * n + k) * HW + p;
        double v = static_cast<double>(logits[idx]);
        if (noise) v += static_cast<double>((*noise)[idx]);
        s[k] = v / tau;
        mx = std::max(mx, s[k]);
      }
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        s[k] = std::exp(s[k] - mx);
        z += s[k];
      }
      std::size_t best = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t idx = (b * n + k) * HW + p;
        soft[idx] = static_cast<T>(s[k] / z);
        if (soft[idx] > soft[(b * n + best) * HW + p]) best = k;
      }
      hard[(b * n + best) * HW + p] = T{1};
    }
  }
}

inline void check_tau(double tau) {
  if (!(tau > 0.0)) throw ContractError("gumbel_softmax: temperature must be positive");
}

}  // namespace detail

/// Straight-through Gumbel-softmax selection. With `rng == nullptr` the noise
/// is zero (deterministic argmax, used at inference).
inline SelectionMap gumbel_softmax_st(const Tensor& logits, double tau, Rng* rng) {
  detail::check_tau(tau);
  SelectionMap z;
  z.tau = tau;
  if (rng) {
    const Tensor g = gumbel_noise(logits.shape(), *rng);
    detail::gumbel_softmax_values(logits, &g, tau, z.soft, z.hard);
  } else {
    detail::gumbel_softmax_values<float>(logits, nullptr, tau, z.soft, z.hard);
  }
  return z;
}

namespace detail {

template <typename T>
std::vector<BasicTensor<T>> padded_kernel_matrices(const std::vector<BasicTensor<T>>& kernels, std::size_t K) {
  std::vector<BasicTensor<T>> mats;
  for (const auto& w : kernels) {
    mats.push_back(pad_kernel(w, K).reshaped(Shape{w.n(), w.c() * K * K}));
  }
  return mats;
}

template <typename T>
void check_sv_args(const Shape& x, const std::vector<BasicTensor<T>>& kernels, const Shape& z) {
  if (kernels.empty()) throw DimensionError("sv_conv2d: empty kernel bank");
  for (const auto& w : kernels) {
    if (w.c() != x.c()) throw DimensionError("sv_conv2d: kernel Cin does not match input channels");
    if (w.n() != kernels.front().n()) throw DimensionError("sv_conv2d: kernels disagree on Cout");
    if (w.h() != w.w()) throw UnsupportedKernelError("sv_conv2d: kernels must be square");
    require_odd_support(w.h());
  }
  if (z.c() != kernels.size()) {
    throw DimensionError("sv_conv2d: selection has " + std::to_string(z.c()) + " channels for " +
                         std::to_string(kernels.size()) + " kernels");
  }
  if (z.n() != x.n() || z.h() != x.h() || z.w() != x.w()) {
    throw DimensionError("sv_conv2d: selection spatial size differs from input");
  }
}

template <typename T>
std::size_t max_support(const std::vector<BasicTensor<T>>& kernels) {
  std::size_t K = 0;
  for (const auto& w : kernels) K = std::max(K, w.h());
  return K;
}

// y_r = sum_i z(r,i) * W_i * cols_r, skipping kernels with zero weight.
template <typename T>
BasicTensor<T> sv_apply(const BasicTensor<T>& cols, const std::vector<BasicTensor<T>>& wt,
                        const BasicTensor<T>& z, std::size_t cout) {
  const std::size_t N = z.n(), n = z.c(), HW = z.h() * z.w(), KK = cols.w();
  BasicTensor<T> rows(Shape{N * HW, cout});
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t p = 0; p < HW; ++p) {
      const std::size_t r = b * HW + p;
      const T* crow = cols.ptr() + r * KK;
      T* out = rows.ptr() + r * cout;
      for (std::size_t i = 0; i < n; ++i) {
        const T zi = z[(b * n + i) * HW + p];
        if (zi == T{0}) continue;
        const T* w = wt[i].ptr();  // KK x cout
        for (std::size_t l = 0; l < KK; ++l) {
          const T cv = zi * crow[l];
          if (cv == T{0}) continue;
          const T* wrow = w + l * cout;
          for (std::size_t o = 0; o < cout; ++o) out[o] += cv * wrow[o];
        }
      }
    }
  }
  return rows;
}

}  // namespace detail

/// Spatially varying convolution. Output pixel (i,j) is the response of the
/// kernels weighted by z(:,i,j); for a one-hot z that is the selected kernel
/// only. Smaller kernels are zero-padded to the bank's maximum support.
template <typename T>
BasicTensor<T> sv_conv2d(const BasicTensor<T>& x, const std::vector<BasicTensor<T>>& kernels,
                         const BasicTensor<T>& z, Padding pad = Padding::Zero) {
  detail::check_sv_args(x.shape(), kernels, z.shape());
  const std::size_t K = detail::max_support(kernels);
  const BasicTensor<T> cols = im2col(x, K, pad);
  std::vector<BasicTensor<T>> wt;
  for (auto& m : detail::padded_kernel_matrices(kernels, K)) wt.push_back(transpose(m));
  return from_rows(detail::sv_apply(cols, wt, z, kernels.front().n()), x.n(), x.h(), x.w());
}

inline Tensor sv_conv2d(const Tensor& x, const KernelBank& bank, const SelectionMap& z, Padding pad = Padding::Zero) {
  return sv_conv2d(x, bank.kernels, z.hard, pad);
}

/// ||Wf Wf^T - I||_F^2 over the padded, flattened, L2-normalised kernels.
template <typename T>
double decorrelation_loss(const std::vector<BasicTensor<T>>& kernels) {
  if (kernels.empty()) throw ContractError("decorrelation_loss: empty bank");
  const std::size_t K = detail::max_support(kernels);
  std::vector<std::vector<double>> u;
  for (const auto& w : kernels) {
    const BasicTensor<T> p = pad_kernel(w, K);
    double r = 0.0;
    for (T v : p.data()) r += static_cast<double>(v) * static_cast<double>(v);
    r = std::sqrt(r);
    std::vector<double> row(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) row[i] = static_cast<double>(p[i]) / (r + kNormGuard);
    u.push_back(std::move(row));
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < u.size(); ++j) {
      double g = 0.0;
      if (u[i].size() != u[j].size()) throw DimensionError("decorrelation_loss: kernels disagree on Cout/Cin");
      for (std::size_t e = 0; e < u[i].size(); ++e) g += u[i][e] * u[j][e];
      const double d = g - (i == j ? 1.0 : 0.0);
      loss += d * d;
    }
  return loss;
}

inline double decorrelation_loss(const KernelBank& bank) { return decorrelation_loss(bank.kernels); }

/// Selector logits, N x n x H x W.
inline Tensor select_coefficients(const Tensor& x, const SelectorNet& net, Padding pad = Padding::Zero) {
  if (net.layers.empty()) throw ContractError("select_coefficients: empty selector");
  if (x.c() != net.in_channels()) {
    throw DimensionError("select_coefficients: input has " + std::to_string(x.c()) + " channels, selector expects " +
                         std::to_string(net.in_channels()));
  }
  Tensor h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    h = add_channel_bias(conv2d(h, net.layers[l].weight, pad), net.layers[l].bias);
    if (l + 1 < net.layers.size()) h = relu(h);
  }
  return h;
}

struct PafuOutput {
  Tensor y;
  SelectionMap z;
};

/// Full unit: select per pixel, then filter. `rng == nullptr` is inference.
inline PafuOutput pafu_forward(const Tensor& x, const KernelBank& bank, const SelectorNet& net, double tau, Rng* rng,
                               Padding pad = Padding::Zero) {
  if (net.out_channels() != bank.count()) throw DimensionError("pafu_forward: selector/bank kernel count mismatch");
  PafuOutput out;
  out.z = gumbel_softmax_st(select_coefficients(x, net, pad), tau, rng);
  out.y = sv_conv2d(x, bank, out.z, pad);
  return out;
}

using Rgb = std::array<float, 3>;

inline std::vector<Rgb> default_palette() {
  return {Rgb{0.90f, 0.10f, 0.10f}, Rgb{0.10f, 0.45f, 0.90f}, Rgb{0.15f, 0.75f, 0.20f}, Rgb{0.95f, 0.80f, 0.10f},
          Rgb{0.60f, 0.20f, 0.75f}, Rgb{0.10f, 0.80f, 0.80f}, Rgb{0.95f, 0.50f, 0.10f}, Rgb{0.50f, 0.50f, 0.50f},
          Rgb{0.55f, 0.30f, 0.10f}, Rgb{0.95f, 0.55f, 0.75f}, Rgb{0.00f, 0.00f, 0.00f}, Rgb{1.00f, 1.00f, 1.00f}};
}

/// Colour each pixel of the first batch item by its selected kernel.
/// `bayer_split` tiles the four RGGB phases as a 2x2 grid of H/2 x W/2 images
/// (R | G1 on top, G2 | B below).
inline Tensor selection_heatmap(const SelectionMap& z, const std::vector<Rgb>& palette, bool bayer_split = false) {
  if (palette.size() < z.kernels()) throw ContractError("selection_heatmap: palette shorter than kernel count");
  const std::size_t H = z.hard.h(), W = z.hard.w();
  const std::vector<std::size_t> idx = z.indices();
  Tensor img(Shape{3, H, W});
  if (!bayer_split) {
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        for (std::size_t c = 0; c < 3; ++c) img(0, c, i, j) = palette[idx[i * W + j]][c];
    return img;
  }
  if (H % 2 || W % 2) throw DimensionError("selection_heatmap: bayer split needs even dimensions");
  const std::size_t h2 = H / 2, w2 = W / 2;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t pi = i % 2, pj = j % 2;
      const std::size_t oi = pi * h2 + i / 2, oj = pj * w2 + j / 2;
      for (std::size_t c = 0; c < 3; ++c) img(0, c, oi, oj) = palette[idx[i * W + j]][c];
    }
  return img;
}

namespace ad {

template <typename T>
struct GumbelSelection {
  Var<T> z;  // value is hard (or soft when hard_forward is false)
  BasicTensor<T> soft;
  BasicTensor<T> hard;
};

/// Straight-through Gumbel-softmax on the tape. The forward value is the hard
/// one-hot when `hard_forward`, else the soft probabilities; the backward pass
/// always uses the softmax Jacobian. `noise` may be empty (zero noise).
template <typename T>
GumbelSelection<T> gumbel_softmax(const Var<T>& logits, double tau, const BasicTensor<T>& noise, bool hard_forward) {
  pafu::detail::check_tau(tau);
  if (!noise.empty()) require_same_shape(noise.shape(), logits.shape(), "gumbel_softmax noise");
  GumbelSelection<T> sel;
  pafu::detail::gumbel_softmax_values(logits.value(), noise.empty() ? nullptr : &noise, tau, sel.soft, sel.hard);
  BasicTensor<T> value = hard_forward ? sel.hard : sel.soft;
  sel.z = logits.tape().record(OpTag::GumbelSoftmax, {logits}, std::move(value),
                               [soft = sel.soft, tau](const BasicTensor<T>& g) {
                                 const std::size_t N = soft.n(), n = soft.c(), HW = soft.h() * soft.w();
                                 BasicTensor<T> gl(soft.shape());
                                 for (std::size_t b = 0; b < N; ++b)
                                   for (std::size_t p = 0; p < HW; ++p) {
                                     double dot = 0.0;
                                     for (std::size_t k = 0; k < n; ++k) {
                                       const std::size_t i = (b * n + k) * HW + p;
                                       dot += static_cast<double>(soft[i]) * static_cast<double>(g[i]);
                                     }
                                     for (std::size_t k = 0; k < n; ++k) {
                                       const std::size_t i = (b * n + k) * HW + p;
                                       gl[i] = static_cast<T>(static_cast<double>(soft[i]) *
                                                              (static_cast<double>(g[i]) - dot) / tau);
                                     }
                                   }
                                 return std::vector<BasicTensor<T>>{std::move(gl)};
                               });
  return sel;
}

/// Inputs on the tape: x, then each kernel, then z.
template <typename T>
Var<T> sv_conv2d(const Var<T>& x, const std::vector<Var<T>>& kernels, const Var<T>& z, Padding pad = Padding::Zero) {
  std::vector<BasicTensor<T>> kv;
  for (const auto& k : kernels) kv.push_back(k.value());
  pafu::detail::check_sv_args(x.shape(), kv, z.shape());
  const std::size_t K = pafu::detail::max_support(kv);
  const std::size_t cout = kv.front().n();
  BasicTensor<T> cols = pafu::im2col(x.value(), K, pad);
  std::vector<BasicTensor<T>> wmat = pafu::detail::padded_kernel_matrices(kv, K);
  std::vector<BasicTensor<T>> wt;
  for (const auto& m : wmat) wt.push_back(transpose(m));
  auto out = from_rows(pafu::detail::sv_apply(cols, wt, z.value(), cout), x.value().n(), x.value().h(), x.value().w());

  std::vector<Var<T>> inputs{x};
  inputs.insert(inputs.end(), kernels.begin(), kernels.end());
  inputs.push_back(z);
  std::vector<std::size_t> supports;
  for (const auto& k : kv) supports.push_back(k.h());
  const bool need_dx = x.requires_grad();
  const bool need_dz = z.requires_grad();
  std::vector<bool> need_dw;
  for (const auto& k : kernels) need_dw.push_back(k.requires_grad());

  return x.tape().record(
      OpTag::SvConv2d, inputs, std::move(out),
      [cols = std::move(cols), wmat = std::move(wmat), zv = z.value(), xs = x.shape(), supports, K, cout, pad, need_dx,
       need_dz, need_dw](const BasicTensor<T>& g) {
        const std::size_t n = wmat.size(), N = zv.n(), HW = zv.h() * zv.w(), KK = cols.w();
        const BasicTensor<T> dy = to_rows(g);
        std::vector<BasicTensor<T>> res(n + 2);
        BasicTensor<T> dcols;
        if (need_dx) dcols = BasicTensor<T>(cols.shape());
        BasicTensor<T> dz;
        if (need_dz) dz = BasicTensor<T>(zv.shape());
        std::vector<BasicTensor<T>> dw(n);
        for (std::size_t i = 0; i < n; ++i)
          if (need_dw[i]) dw[i] = BasicTensor<T>(wmat[i].shape());

        std::vector<T> resp(cout);
        for (std::size_t b = 0; b < N; ++b)
          for (std::size_t p = 0; p < HW; ++p) {
            const std::size_t r = b * HW + p;
            const T* crow = cols.ptr() + r * KK;
            const T* grow = dy.ptr() + r * cout;
            for (std::size_t i = 0; i < n; ++i) {
              const T zi = zv[(b * n + i) * HW + p];
              const T* w = wmat[i].ptr();  // cout x KK
              if (need_dz) {
                // d/dz_i = <dy_r, W_i cols_r>
                double acc = 0.0;
                for (std::size_t o = 0; o < cout; ++o) {
                  if (grow[o] == T{0}) continue;
                  const T* wrow = w + o * KK;
                  T s{0};
                  for (std::size_t l = 0; l < KK; ++l) s += wrow[l] * crow[l];
                  acc += static_cast<double>(grow[o]) * static_cast<double>(s);
                }
                dz[(b * n + i) * HW + p] = static_cast<T>(acc);
              }
              if (zi == T{0}) continue;
              for (std::size_t o = 0; o < cout; ++o) {
                const T gv = zi * grow[o];
                if (gv == T{0}) continue;
                if (need_dx) {
                  const T* wrow = w + o * KK;
                  T* drow = dcols.ptr() + r * KK;
                  for (std::size_t l = 0; l < KK; ++l) drow[l] += gv * wrow[l];
                }
                if (need_dw[i]) {
                  T* dwrow = dw[i].ptr() + o * KK;
                  for (std::size_t l = 0; l < KK; ++l) dwrow[l] += gv * crow[l];
                }
              }
            }
          }
        if (need_dx) res[0] = pafu::col2im(dcols, xs, K, pad);
        for (std::size_t i = 0; i < n; ++i) {
          if (!need_dw[i]) continue;
          const std::size_t cin = xs.c();
          res[1 + i] = crop_kernel(dw[i].reshaped(Shape{cout, cin, K, K}), supports[i]);
        }
        if (need_dz) res[n + 1] = std::move(dz);
        return res;
      });
}

/// Decorrelation regularizer over kernels of possibly different supports.
template <typename T>
Var<T> decorrelation_loss(const std::vector<Var<T>>& kernels) {
  if (kernels.empty()) throw ContractError("decorrelation_loss: empty bank");
  std::vector<BasicTensor<T>> kv;
  for (const auto& k : kernels) kv.push_back(k.value());
  const std::size_t K = pafu::detail::max_support(kv);
  const std::size_t n = kv.size();
  std::vector<std::vector<double>> w(n), u(n);
  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    const BasicTensor<T> p = pad_kernel(kv[i], K);
    w[i].resize(p.size());
    double r = 0.0;
    for (std::size_t e = 0; e < p.size(); ++e) {
      w[i][e] = static_cast<double>(p[e]);
      r += w[i][e] * w[i][e];
    }
    norm[i] = std::sqrt(r);
    if (i > 0 && w[i].size() != w[0].size()) throw DimensionError("decorrelation_loss: kernels disagree on Cout/Cin");
    u[i].resize(p.size());
    for (std::size_t e = 0; e < p.size(); ++e) u[i][e] = w[i][e] / (norm[i] + kNormGuard);
  }
  std::vector<double> resid(n * n);  // G - I
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double g = 0.0;
      for (std::size_t e = 0; e < u[i].size(); ++e) g += u[i][e] * u[j][e];
      resid[i * n + j] = g - (i == j ? 1.0 : 0.0);
      loss += resid[i * n + j] * resid[i * n + j];
    }
  std::vector<Var<T>> inputs = kernels;
  return kernels.front().tape().record(
      OpTag::Decorrelation, inputs, BasicTensor<T>::scalar(static_cast<T>(loss)),
      [w = std::move(w), u = std::move(u), norm = std::move(norm), resid = std::move(resid), kv, K,
       n](const BasicTensor<T>& g) {
        const double scale = static_cast<double>(g[0]);
        std::vector<BasicTensor<T>> res(n);
        const std::size_t np = u[0].size();
        for (std::size_t i = 0; i < n; ++i) {
          // dL/du_i = 4 sum_j (G - I)_ij u_j
          std::vector<double> du(np, 0.0);
          for (std::size_t j = 0; j < n; ++j) {
            const double c = 4.0 * resid[i * n + j];
            for (std::size_t e = 0; e < np; ++e) du[e] += c * u[j][e];
          }
          const double r = norm[i], d = r + kNormGuard;
          double wdu = 0.0;
          for (std::size_t e = 0; e < np; ++e) wdu += w[i][e] * du[e];
          const double proj = r > 0.0 ? wdu / (r * d * d) : 0.0;
          const BasicTensor<T>& k = kv[i];
          BasicTensor<T> gp(Shape{k.n(), k.c(), K, K});
          for (std::size_t e = 0; e < np; ++e) gp[e] = static_cast<T>(scale * (du[e] / d - w[i][e] * proj));
          res[i] = crop_kernel(gp, k.h());
        }
        return res;
      });
}

/// Selector on the tape. `params` alternates weight, bias per layer.
template <typename T>
Var<T> select_coefficients(const Var<T>& x, const std::vector<Var<T>>& params, Padding pad = Padding::Zero) {
  if (params.empty() || params.size() % 2 != 0) throw ContractError("select_coefficients: params must be (w,b) pairs");
  if (x.shape().c() != params[0].shape().c()) throw DimensionError("select_coefficients: channel mismatch");
  Var<T> h = x;
  const std::size_t layers = params.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::add_bias(ad::conv2d(h, params[2 * l], pad), params[2 * l + 1]);
    if (l + 1 < layers) h = ad::relu(h);
  }
  return h;
}

}  // namespace ad
}  // namespace pafu
