#pragma once

// Tensor-core kernels: layout transforms and the spatially invariant
// convolution. Matrix products go through Eigen on a single thread, so
// results are bit-reproducible run to run.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include <Eigen/Core>

#include "pafu/error.hpp"
#include "pafu/tensor.hpp"

namespace pafu {

enum class Padding { Zero, Replicate };

inline const char* to_string(Padding p) { return p == Padding::Zero ? "zero" : "replicate"; }

namespace detail {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m,p] += A[m,k] * B[k,p], all row-major.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p) {
  using Idx = Eigen::Index;
  Eigen::Map<const RowMajor<T>> A(a, static_cast<Idx>(m), static_cast<Idx>(k));
  Eigen::Map<const RowMajor<T>> B(b, static_cast<Idx>(k), static_cast<Idx>(p));
  Eigen::Map<RowMajor<T>> C(c, static_cast<Idx>(m), static_cast<Idx>(p));
  C.noalias() += A * B;
}

// C[k,p] += A[m,k]^T * B[m,p].
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p) {
  using Idx = Eigen::Index;
  Eigen::Map<const RowMajor<T>> A(a, static_cast<Idx>(m), static_cast<Idx>(k));
  Eigen::Map<const RowMajor<T>> B(b, static_cast<Idx>(m), static_cast<Idx>(p));
  Eigen::Map<RowMajor<T>> C(c, static_cast<Idx>(k), static_cast<Idx>(p));
  C.noalias() += A.transpose() * B;
}

inline std::ptrdiff_t clamp_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  return i < 0 ? 0 : (i >= n ? n - 1 : i);
}

inline void require_odd_support(std::size_t k) {
  if (k % 2 == 0) {
    throw UnsupportedKernelError("kernel support must be odd, got " + std::to_string(k));
  }
}

inline void require_matrix(const Shape& s, const char* what) {
  if (s.n() != 1 || s.c() != 1) {
    throw DimensionError(std::string(what) + ": expected a matrix, got " + s.str());
  }
}

}  // namespace detail

/// Row-major matrix view helpers: rank-2 tensors are {rows, cols}.
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_matrix(a.shape(), "transpose");
  const std::size_t m = a.h(), k = a.w();
  BasicTensor<T> out(Shape{k, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) out[j * m + i] = a[i * k + j];
  return out;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a.shape(), "matmul");
  detail::require_matrix(b.shape(), "matmul");
  if (a.w() != b.h()) {
    throw DimensionError("matmul: inner extents differ " + a.shape().str() + " x " + b.shape().str());
  }
  BasicTensor<T> out(Shape{a.h(), b.w()});
  detail::gemm_acc(a.ptr(), b.ptr(), out.ptr(), a.h(), a.w(), b.w());
  return out;
}

enum class Elementwise { Add, Sub, Mul, Scale, Relu, Abs };

template <typename T>
BasicTensor<T> elementwise(Elementwise op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  BasicTensor<T> out(a.shape());
  auto x = a.data();
  auto y = out.data();
  switch (op) {
    case Elementwise::Relu:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
      return out;
    case Elementwise::Abs:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::abs(x[i]);
      return out;
    default:
      break;
  }
  if (b.size() == 1 && a.size() != 1) return elementwise(op, a, b[0]);
  require_same_shape(a.shape(), b.shape(), "elementwise");
  auto z = b.data();
  switch (op) {
    case Elementwise::Add:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + z[i];
      break;
    case Elementwise::Sub:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - z[i];
      break;
    case Elementwise::Mul:
    case Elementwise::Scale:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * z[i];
      break;
    default:
      break;
  }
  return out;
}

template <typename T>
BasicTensor<T> elementwise(Elementwise op, const BasicTensor<T>& a, T s) {
  BasicTensor<T> out(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    switch (op) {
      case Elementwise::Add: y[i] = x[i] + s; break;
      case Elementwise::Sub: y[i] = x[i] - s; break;
      case Elementwise::Mul:
      case Elementwise::Scale: y[i] = x[i] * s; break;
      case Elementwise::Relu: y[i] = x[i] > T{0} ? x[i] : T{0}; break;
      case Elementwise::Abs: y[i] = std::abs(x[i]); break;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) { return elementwise(Elementwise::Add, a, b); }
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) { return elementwise(Elementwise::Sub, a, b); }
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) { return elementwise(Elementwise::Mul, a, b); }
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) { return elementwise(Elementwise::Scale, a, s); }
template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) { return elementwise(Elementwise::Relu, a, T{0}); }
template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& a) { return elementwise(Elementwise::Abs, a, T{0}); }

/// Patch matrix: row (n,i,j) holds the k x k x Cin neighbourhood of pixel
/// (i,j), column order (c, u, v) matching a flattened Cout x Cin x k x k kernel.
template <typename T>
BasicTensor<T> im2col(const BasicTensor<T>& x, std::size_t k, Padding pad) {
  detail::require_odd_support(k);
  const std::size_t N = x.n(), C = x.c(), H = x.h(), W = x.w();
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t cols = C * k * k;
  BasicTensor<T> out(Shape{N * H * W, cols});
  T* dst = out.ptr();
  const T* src = x.ptr();
  const auto Hs = static_cast<std::ptrdiff_t>(H), Ws = static_cast<std::ptrdiff_t>(W);
  const auto ks = static_cast<std::ptrdiff_t>(k);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::ptrdiff_t i = 0; i < Hs; ++i) {
      const bool row_interior = i >= r && i + r < Hs;
      for (std::ptrdiff_t j = 0; j < Ws; ++j, dst += cols) {
        T* d = dst;
        if (row_interior && j >= r && j + r < Ws) {
          for (std::size_t c = 0; c < C; ++c) {
            const T* p = src + (n * C + c) * H * W + (i - r) * Ws + (j - r);
            for (std::ptrdiff_t u = 0; u < ks; ++u, p += Ws)
              for (std::ptrdiff_t v = 0; v < ks; ++v) *d++ = p[v];
          }
          continue;
        }
        for (std::size_t c = 0; c < C; ++c) {
          const T* plane = src + (n * C + c) * H * W;
          for (std::ptrdiff_t u = -r; u <= r; ++u) {
            std::ptrdiff_t a = i + u;
            const bool row_in = a >= 0 && a < Hs;
            if (pad == Padding::Replicate) a = detail::clamp_index(a, Hs);
            for (std::ptrdiff_t v = -r; v <= r; ++v) {
              std::ptrdiff_t b = j + v;
              if (pad == Padding::Zero) {
                *d++ = row_in && b >= 0 && b < Ws ? plane[a * Ws + b] : T{0};
              } else {
                *d++ = plane[a * Ws + detail::clamp_index(b, Ws)];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

/// Scatter-add adjoint of im2col: <im2col(x), g> == <x, col2im(g)>.
template <typename T>
BasicTensor<T> col2im(const BasicTensor<T>& cols, Shape out_shape, std::size_t k, Padding pad) {
  detail::require_odd_support(k);
  const std::size_t N = out_shape.n(), C = out_shape.c(), H = out_shape.h(), W = out_shape.w();
  if (cols.h() != N * H * W || cols.w() != C * k * k || cols.n() != 1 || cols.c() != 1) {
    throw DimensionError("col2im: columns " + cols.shape().str() + " inconsistent with " +
                         out_shape.str() + " at support " + std::to_string(k));
  }
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t ncol = C * k * k;
  BasicTensor<T> out(out_shape);
  T* dst = out.ptr();
  const T* src = cols.ptr();
  const auto Hs = static_cast<std::ptrdiff_t>(H), Ws = static_cast<std::ptrdiff_t>(W);
  const auto ks = static_cast<std::ptrdiff_t>(k);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::ptrdiff_t i = 0; i < Hs; ++i) {
      const bool row_interior = i >= r && i + r < Hs;
      for (std::ptrdiff_t j = 0; j < Ws; ++j, src += ncol) {
        const T* g = src;
        if (row_interior && j >= r && j + r < Ws) {
          for (std::size_t c = 0; c < C; ++c) {
            T* p = dst + (n * C + c) * H * W + (i - r) * Ws + (j - r);
            for (std::ptrdiff_t u = 0; u < ks; ++u, p += Ws)
              for (std::ptrdiff_t v = 0; v < ks; ++v) p[v] += *g++;
          }
          continue;
        }
        for (std::size_t c = 0; c < C; ++c) {
          T* plane = dst + (n * C + c) * H * W;
          for (std::ptrdiff_t u = -r; u <= r; ++u) {
            std::ptrdiff_t a = i + u;
            const bool row_in = a >= 0 && a < Hs;
            if (pad == Padding::Replicate) a = detail::clamp_index(a, Hs);
            for (std::ptrdiff_t v = -r; v <= r; ++v, ++g) {
              const std::ptrdiff_t b = j + v;
              if (pad == Padding::Zero) {
                if (row_in && b >= 0 && b < Ws) plane[a * Ws + b] += *g;
              } else {
                plane[a * Ws + detail::clamp_index(b, Ws)] += *g;
              }
            }
          }
        }
      }
    }
  }
  return out;
}

/// NCHW -> (N*H*W) x C.
template <typename T>
BasicTensor<T> to_rows(const BasicTensor<T>& x) {
  const std::size_t N = x.n(), C = x.c(), HW = x.h() * x.w();
  BasicTensor<T> out(Shape{N * HW, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* s = x.ptr() + (n * C + c) * HW;
      T* d = out.ptr() + n * HW * C + c;
      for (std::size_t p = 0; p < HW; ++p) d[p * C] = s[p];
    }
  return out;
}

/// (N*H*W) x C -> NCHW with the given N,H,W.
template <typename T>
BasicTensor<T> from_rows(const BasicTensor<T>& rows, std::size_t N, std::size_t H, std::size_t W) {
  const std::size_t C = rows.w(), HW = H * W;
  if (rows.h() != N * HW) throw DimensionError("from_rows: row count mismatch");
  BasicTensor<T> out(Shape{N, C, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* s = rows.ptr() + n * HW * C + c;
      T* d = out.ptr() + (n * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) d[p] = s[p * C];
    }
  return out;
}

namespace detail {

inline void check_conv_args(const Shape& x, const Shape& w) {
  if (w.h() != w.w()) throw UnsupportedKernelError("conv2d: kernel must be square, got " + w.str());
  require_odd_support(w.h());
  if (w.c() != x.c()) {
    throw DimensionError("conv2d: input has " + std::to_string(x.c()) + " channels, weight expects " +
                         std::to_string(w.c()));
  }
}

}  // namespace detail

/// Same-size cross-correlation y[co] = sum_ci W[co,ci] * x[ci] over the k x k
/// neighbourhood, executed as im2col followed by one matrix product.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, Padding pad = Padding::Zero) {
  detail::check_conv_args(x.shape(), weight.shape());
  const std::size_t k = weight.h(), cout = weight.n();
  const BasicTensor<T> cols = im2col(x, k, pad);
  const BasicTensor<T> wt = transpose(weight.reshaped(Shape{cout, x.c() * k * k}));
  return from_rows(matmul(cols, wt), x.n(), x.h(), x.w());
}

/// Adds bias[c] to every pixel of channel c.
template <typename T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  if (bias.size() != x.c()) throw DimensionError("add_channel_bias: bias length != channels");
  BasicTensor<T> out = x;
  const std::size_t HW = x.h() * x.w();
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c) {
      T* d = out.ptr() + (n * x.c() + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) d[p] += bias[c];
    }
  return out;
}

/// Sub-pixel rearrangement: out[n,c,h*r+i,w*r+j] = in[n, c*r*r + i*r + j, h, w].
template <typename T>
BasicTensor<T> depth_to_space(const BasicTensor<T>& x, std::size_t r) {
  if (r == 0 || x.c() % (r * r) != 0) {
    throw DimensionError("depth_to_space: channels " + std::to_string(x.c()) + " not divisible by r^2");
  }
  const std::size_t N = x.n(), C = x.c() / (r * r), H = x.h(), W = x.w();
  BasicTensor<T> out(Shape{N, C, H * r, W * r});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j) {
          const std::size_t src_c = c * r * r + i * r + j;
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) out(n, c, h * r + i, w * r + j) = x(n, src_c, h, w);
        }
  return out;
}

/// Exact inverse of depth_to_space.
template <typename T>
BasicTensor<T> space_to_depth(const BasicTensor<T>& x, std::size_t r) {
  if (r == 0 || x.h() % r != 0 || x.w() % r != 0) {
    throw DimensionError("space_to_depth: spatial size not divisible by r");
  }
  const std::size_t N = x.n(), C = x.c(), H = x.h() / r, W = x.w() / r;
  BasicTensor<T> out(Shape{N, C * r * r, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j) {
          const std::size_t dst_c = c * r * r + i * r + j;
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) out(n, dst_c, h, w) = x(n, c, h * r + i, w * r + j);
        }
  return out;
}

/// Embeds a Cout x Cin x k x k kernel at the centre of a K x K zero kernel.
template <typename T>
BasicTensor<T> pad_kernel(const BasicTensor<T>& w, std::size_t K) {
  const std::size_t k = w.h();
  if (k > K || (K - k) % 2 != 0) throw DimensionError("pad_kernel: cannot pad support " + std::to_string(k));
  if (k == K) return w;
  const std::size_t off = (K - k) / 2;
  BasicTensor<T> out(Shape{w.n(), w.c(), K, K});
  for (std::size_t o = 0; o < w.n(); ++o)
    for (std::size_t i = 0; i < w.c(); ++i)
      for (std::size_t u = 0; u < k; ++u)
        for (std::size_t v = 0; v < k; ++v) out(o, i, u + off, v + off) = w(o, i, u, v);
  return out;
}

/// Inverse of pad_kernel (centre crop).
template <typename T>
BasicTensor<T> crop_kernel(const BasicTensor<T>& w, std::size_t k) {
  const std::size_t K = w.h();
  if (k > K || (K - k) % 2 != 0) throw DimensionError("crop_kernel: cannot crop to support " + std::to_string(k));
  if (k == K) return w;
  const std::size_t off = (K - k) / 2;
  BasicTensor<T> out(Shape{w.n(), w.c(), k, k});
  for (std::size_t o = 0; o < w.n(); ++o)
    for (std::size_t i = 0; i < w.c(); ++i)
      for (std::size_t u = 0; u < k; ++u)
        for (std::size_t v = 0; v < k; ++v) out(o, i, u, v) = w(o, i, u + off, v + off);
  return out;
}

template <typename T>
double sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  return acc;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace pafu
