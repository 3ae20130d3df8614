#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "pafu/autodiff.hpp"
#include "pafu/ops.hpp"
#include "pafu/tensor.hpp"

namespace pafu {

/// Mean absolute error, accumulated in double in element order.
template <typename T>
double l1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  require_same_shape(pred.shape(), target.shape(), "l1_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    acc += std::abs(static_cast<double>(pred[i]) - static_cast<double>(target[i]));
  }
  return acc / static_cast<double>(pred.size());
}

/// Mean squared error.
template <typename T>
double l2_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  require_same_shape(pred.shape(), target.shape(), "l2_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

/// Task loss plus the mean of per-unit regularizers; an empty list adds 0.
inline double total_loss(double task, const std::vector<double>& reg) {
  if (reg.empty()) return task;
  double acc = 0.0;
  for (double r : reg) acc += r;
  return task + acc / static_cast<double>(reg.size());
}

inline constexpr double kPsnrCapDb = 99.0;

/// 10 log10(peak^2 / MSE) over all elements; 99 dB when MSE < 1e-12.
template <typename T>
double psnr(const BasicTensor<T>& a, const BasicTensor<T>& b, double peak = 1.0) {
  const double mse = l2_loss(a, b);
  if (mse < 1e-12) return kPsnrCapDb;
  return 10.0 * std::log10(peak * peak / mse);
}

/// BT.601 luma in [0,1] of an RGB image (3xHxW or 1x3xHxW).
template <typename T>
BasicTensor<T> rgb_to_y(const BasicTensor<T>& rgb) {
  if (rgb.c() != 3) throw DimensionError("rgb_to_y: expected 3 channels");
  const std::size_t H = rgb.h(), W = rgb.w();
  BasicTensor<T> y(Shape{rgb.n(), 1, H, W});
  for (std::size_t n = 0; n < rgb.n(); ++n)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const double v = 16.0 / 255.0 + (65.481 * rgb(n, 0, i, j) + 128.553 * rgb(n, 1, i, j) +
                                          24.966 * rgb(n, 2, i, j)) / 255.0;
        y(n, 0, i, j) = static_cast<T>(v);
      }
  return y;
}

template <typename T>
BasicTensor<T> crop_border(const BasicTensor<T>& x, std::size_t border) {
  if (2 * border >= x.h() || 2 * border >= x.w()) throw DimensionError("crop_border: border too large");
  const std::size_t H = x.h() - 2 * border, W = x.w() - 2 * border;
  BasicTensor<T> out(Shape{x.n(), x.c(), H, W});
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) out(n, c, i, j) = x(n, c, i + border, j + border);
  return out;
}

/// Luma-only PSNR after cropping `border` pixels, the usual super-resolution
/// benchmark convention.
template <typename T>
double psnr_y(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t border) {
  require_same_shape(a.shape(), b.shape(), "psnr_y");
  auto ya = rgb_to_y(a), yb = rgb_to_y(b);
  if (border > 0) {
    ya = crop_border(ya, border);
    yb = crop_border(yb, border);
  }
  return psnr(ya, yb);
}

namespace ad {

template <typename T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& target) {
  const double v = pafu::l1_loss(pred.value(), target.value());
  return pred.tape().record(
      OpTag::L1Loss, {pred, target}, BasicTensor<T>::scalar(static_cast<T>(v)),
      [p = pred.value(), t = target.value()](const BasicTensor<T>& g) {
        const T s = static_cast<T>(g[0] / static_cast<double>(p.size()));
        BasicTensor<T> gp(p.shape()), gt(p.shape());
        for (std::size_t i = 0; i < p.size(); ++i) {
          const T d = p[i] - t[i];
          const T sg = d > T{0} ? s : (d < T{0} ? -s : T{0});
          gp[i] = sg;
          gt[i] = -sg;
        }
        return std::vector<BasicTensor<T>>{std::move(gp), std::move(gt)};
      });
}

template <typename T>
Var<T> l2_loss(const Var<T>& pred, const Var<T>& target) {
  const double v = pafu::l2_loss(pred.value(), target.value());
  return pred.tape().record(
      OpTag::L2Loss, {pred, target}, BasicTensor<T>::scalar(static_cast<T>(v)),
      [p = pred.value(), t = target.value()](const BasicTensor<T>& g) {
        const T s = static_cast<T>(2.0 * g[0] / static_cast<double>(p.size()));
        BasicTensor<T> gp(p.shape()), gt(p.shape());
        for (std::size_t i = 0; i < p.size(); ++i) {
          gp[i] = s * (p[i] - t[i]);
          gt[i] = -gp[i];
        }
        return std::vector<BasicTensor<T>>{std::move(gp), std::move(gt)};
      });
}

template <typename T>
Var<T> total_loss(const Var<T>& task, const std::vector<Var<T>>& reg) {
  if (reg.empty()) return task;
  Var<T> acc = reg.front();
  for (std::size_t i = 1; i < reg.size(); ++i) acc = ad::add(acc, reg[i]);
  return ad::add(task, ad::scale(acc, static_cast<T>(1.0 / static_cast<double>(reg.size()))));
}

}  // namespace ad
}  // namespace pafu
