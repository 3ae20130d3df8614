#pragma once

// Named finite-difference checks, one per differentiable op plus the full
// unit on its soft path. Non-scalar ops are reduced with a fixed random
// weighting so every Jacobian entry contributes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pafu/autodiff.hpp"
#include "pafu/gradcheck.hpp"
#include "pafu/losses.hpp"
#include "pafu/pafu_unit.hpp"

namespace pafu {

using DTensor = BasicTensor<double>;
using DVar = Var<double>;

struct GradCheckCase {
  std::string name;
  std::function<DVar(Tape<double>&, std::vector<DVar>&)> f;
  std::vector<DTensor> inputs;
  double tolerance = 1e-3;
  std::size_t max_coords = 0;
};

namespace detail {

inline DTensor drandn(Shape s, Rng& rng, double sd = 1.0) { return randn<double>(s, rng, sd); }

// Values bounded away from zero so relu/abs kinks stay out of the stencil.
inline DTensor away_from_zero(Shape s, Rng& rng) {
  DTensor t(s);
  for (auto& v : t.data()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return t;
}

// sum(y * R) for a fixed random R.
inline DVar weighted_sum(const DVar& y, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(y, y.tape().constant(drandn(y.shape(), rng))));
}

inline DTensor offset_target(const DTensor& pred, Rng& rng) {
  DTensor t(pred.shape());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = pred[i] + (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.5, 1.0);
  return t;
}

}  // namespace detail

inline const std::vector<std::string>& grad_check_case_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& op : kDifferentiableOps) n.emplace_back(op.name);
    n.emplace_back("pafu");
    return n;
  }();
  return names;
}

inline GradCheckCase make_grad_check_case(const std::string& name, std::uint64_t seed = 0) {
  using detail::away_from_zero;
  using detail::drandn;
  using detail::weighted_sum;
  Rng rng = Rng(seed).split(0x6763);
  const std::uint64_t rseed = seed * 7919 + 17;
  GradCheckCase c;
  c.name = name;

  if (name == "add" || name == "sub" || name == "mul") {
    c.inputs = {drandn(Shape{2, 3, 4}, rng), drandn(Shape{2, 3, 4}, rng)};
    c.f = [name, rseed](Tape<double>&, std::vector<DVar>& v) {
      const DVar y = name == "add" ? ad::add(v[0], v[1]) : name == "sub" ? ad::sub(v[0], v[1]) : ad::mul(v[0], v[1]);
      return weighted_sum(y, rseed);
    };
  } else if (name == "scale") {
    c.inputs = {drandn(Shape{3, 5}, rng)};
    c.f = [rseed](Tape<double>&, std::vector<DVar>& v) { return weighted_sum(ad::scale(v[0], -1.7), rseed); };
  } else if (name == "relu" || name == "abs") {
    c.inputs = {away_from_zero(Shape{2, 3, 4}, rng)};
    c.f = [name, rseed](Tape<double>&, std::vector<DVar>& v) {
      return weighted_sum(name == "relu" ? ad::relu(v[0]) : ad::abs(v[0]), rseed);
    };
  } else if (name == "sum") {
    c.inputs = {drandn(Shape{2, 3, 4}, rng)};
    c.f = [](Tape<double>&, std::vector<DVar>& v) { return ad::sum(v[0]); };
  } else if (name == "mean") {
    c.inputs = {drandn(Shape{2, 3, 4}, rng)};
    c.f = [](Tape<double>&, std::vector<DVar>& v) { return ad::mean(ad::mul(v[0], v[0])); };
  } else if (name == "matmul") {
    c.inputs = {drandn(Shape{4, 6}, rng), drandn(Shape{6, 3}, rng)};
    c.f = [rseed](Tape<double>&, std::vector<DVar>& v) { return weighted_sum(ad::matmul(v[0], v[1]), rseed); };
  } else if (name == "conv2d") {
    c.inputs = {drandn(Shape{2, 2, 5, 6}, rng), drandn(Shape{3, 2, 3, 3}, rng)};
    c.f = [rseed](Tape<double>&, std::vector<DVar>& v) {
      return ad::add(weighted_sum(ad::conv2d(v[0], v[1], Padding::Zero), rseed),
                     weighted_sum(ad::conv2d(v[0], v[1], Padding::Replicate), rseed + 1));
    };
  } else if (name == "add_bias") {
    c.inputs = {drandn(Shape{2, 3, 4, 4}, rng), drandn(Shape{3}, rng)};
    c.f = [rseed](Tape<double>&, std::vector<DVar>& v) { return weighted_sum(ad::add_bias(v[0], v[1]), rseed); };
  } else if (name == "im2col") {
    c.inputs = {drandn(Shape{1, 2, 5, 4}, rng)};
    c.f = [rseed](Tape<double>&, std::vector<DVar>& v) {
      return ad::add(weighted_sum(ad::im2col(v[0], 3, Padding::Zero), rseed),
                     weighted_sum(ad::im2col(v[0], 3, Padding::Replicate), rseed + 1));
    };
  } else if (name == "col2im") {
    c.inputs = {drandn(Shape{20, 18}, rng)};
    c.f = [rseed](Tape<double>&, std::vector<DVar>& v) {
      const Shape out{1, 2, 5, 4};
      return ad::add(weighted_sum(ad::col2im(v[0], out, 3, Padding::Zero), rseed),
                     weighted_sum(ad::col2im(v[0], out, 3, Padding::Replicate), rseed + 1));
    };
  } else if (name == "depth_to_space") {
    c.inputs = {drandn(Shape{1, 8, 3, 2}, rng)};
    c.f = [rseed](Tape<double>&, std::vector<DVar>& v) { return weighted_sum(ad::depth_to_space(v[0], 2), rseed); };
  } else if (name == "space_to_depth") {
    c.inputs = {drandn(Shape{1, 2, 4, 6}, rng)};
    c.f = [rseed](Tape<double>&, std::vector<DVar>& v) { return weighted_sum(ad::space_to_depth(v[0], 2), rseed); };
  } else if (name == "l1_loss" || name == "l2_loss") {
    const DTensor p = drandn(Shape{2, 3, 4}, rng);
    c.inputs = {p, detail::offset_target(p, rng)};
    c.f = [name](Tape<double>&, std::vector<DVar>& v) {
      return name == "l1_loss" ? ad::l1_loss(v[0], v[1]) : ad::l2_loss(v[0], v[1]);
    };
  } else if (name == "gumbel_softmax") {
    c.inputs = {drandn(Shape{2, 3, 3, 4}, rng)};
    const DTensor noise = gumbel_noise<double>(Shape{2, 3, 3, 4}, rng);
    c.f = [noise, rseed](Tape<double>&, std::vector<DVar>& v) {
      return weighted_sum(ad::gumbel_softmax(v[0], 0.7, noise, false).z, rseed);
    };
  } else if (name == "sv_conv2d") {
    c.inputs = {drandn(Shape{2, 2, 5, 5}, rng), drandn(Shape{3, 2, 3, 3}, rng), drandn(Shape{3, 2, 5, 5}, rng),
                rand_uniform<double>(Shape{2, 2, 5, 5}, rng, 0.0, 1.0)};
    c.f = [rseed](Tape<double>&, std::vector<DVar>& v) {
      const std::vector<DVar> k{v[1], v[2]};
      return ad::add(weighted_sum(ad::sv_conv2d(v[0], k, v[3], Padding::Zero), rseed),
                     weighted_sum(ad::sv_conv2d(v[0], k, v[3], Padding::Replicate), rseed + 1));
    };
  } else if (name == "decorrelation") {
    c.inputs = {drandn(Shape{2, 3, 3, 3}, rng), drandn(Shape{2, 3, 3, 3}, rng), drandn(Shape{2, 3, 5, 5}, rng),
                drandn(Shape{2, 3, 5, 5}, rng)};
    c.f = [](Tape<double>&, std::vector<DVar>& v) { return ad::decorrelation_loss(v); };
  } else if (name == "pafu") {
    // Full unit on a 1x3x8x8 input: selector (3->8->2), two kernels of
    // supports 3 and 5, fixed Gumbel noise, soft forward, L1 + decorrelation.
    const DTensor x = rand_uniform<double>(Shape{1, 3, 8, 8}, rng, 0.0, 1.0);
    std::vector<DTensor> params{drandn(Shape{8, 3, 3, 3}, rng, 0.4), DTensor(Shape{8}),
                                drandn(Shape{2, 8, 3, 3}, rng, 0.3), drandn(Shape{2}, rng, 0.1),
                                drandn(Shape{3, 3, 3, 3}, rng, 0.3), drandn(Shape{3, 3, 5, 5}, rng, 0.2)};
    // Each hidden bias sits in the widest gap of that channel's pre-activations
    // so no relu is evaluated near its kink.
    const DTensor pre = conv2d(x, params[0], Padding::Zero);
    for (std::size_t ch = 0; ch < 8; ++ch) {
      std::vector<double> v(pre.ptr() + ch * 64, pre.ptr() + (ch + 1) * 64);
      std::sort(v.begin(), v.end());
      std::size_t best = 16;
      for (std::size_t k = 16; k + 1 < 48; ++k)
        if (v[k + 1] - v[k] > v[best + 1] - v[best]) best = k;
      params[1][ch] = -0.5 * (v[best] + v[best + 1]);
    }
    const DTensor noise = gumbel_noise<double>(Shape{1, 2, 8, 8}, rng);
    auto forward = [noise](const DVar& xv, const std::vector<DVar>& p) {
      const DVar logits = ad::select_coefficients(xv, std::vector<DVar>{p[0], p[1], p[2], p[3]}, Padding::Zero);
      const DVar z = ad::gumbel_softmax(logits, 0.5, noise, false).z;
      return ad::sv_conv2d(xv, std::vector<DVar>{p[4], p[5]}, z, Padding::Zero);
    };
    DTensor target;
    {
      Tape<double> t;
      std::vector<DVar> pv;
      for (const auto& p : params) pv.push_back(t.leaf(p));
      target = detail::offset_target(forward(t.leaf(x), pv).value(), rng);
    }
    c.inputs = {x};
    c.inputs.insert(c.inputs.end(), params.begin(), params.end());
    c.f = [forward, target](Tape<double>& t, std::vector<DVar>& v) {
      const std::vector<DVar> p(v.begin() + 1, v.end());
      const DVar y = forward(v[0], p);
      return ad::total_loss(ad::l1_loss(y, t.constant(target)), {ad::decorrelation_loss(std::vector<DVar>{p[4], p[5]})});
    };
    c.tolerance = 1e-2;
  } else {
    throw ContractError("no gradient check named '" + name + "'");
  }
  return c;
}

inline GradCheckResult run_grad_check_case(const GradCheckCase& c, std::uint64_t seed = 0) {
  GradCheckOptions opt;
  opt.seed = seed;
  opt.max_coords = c.max_coords;
  return grad_check(c.f, c.inputs, opt);
}

}  // namespace pafu
